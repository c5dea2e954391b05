//! The embedding language model: vocabulary, mixed token/embedding input,
//! the adapter-plus-decoder network, decoding and checkpoints.

pub mod checkpoint;
mod decode;
mod elm;
mod mixed;
mod vocab;

pub use checkpoint::{checkpoint_digest, Checkpoint, Manifest};
pub use decode::{decode_text, decode_tokens, DecodeMode, Decoded};
pub use elm::{
    AdapterConfig, ElmConfig, ElmModel, ForwardCache, ADAPTER_PREFIX, DECODER_PREFIX, TOKEN_PREFIX,
};
pub use mixed::{build_prompt, Element, EmbeddingTables, Example, MixedSequence};
pub use vocab::{tokenize_words, Vocab, BOS, EOS, PAD, UNK};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::SpaceKind;
    use crate::error::ElmError;
    use crate::nn::{grad_check, GradCheckable, GradTable, ParamSet};
    use crate::rng::SplitMix64;

    fn tiny() -> ElmConfig {
        ElmConfig {
            vocab_size: 9,
            d_model: 8,
            layers: 2,
            heads: 2,
            context: 12,
            ff_hidden: 6,
            adapter_hidden: 5,
            adapters: vec![
                AdapterConfig {
                    space: SpaceKind::Semantic,
                    input_dim: 4,
                    output_dim: 8,
                },
                AdapterConfig {
                    space: SpaceKind::Behavioral,
                    input_dim: 3,
                    output_dim: 8,
                },
            ],
        }
    }

    fn seq_with_embed(v: Vec<f64>) -> MixedSequence {
        let mut s = MixedSequence::tokens(&[BOS, 5]);
        s.push_embed(v, SpaceKind::Semantic);
        s.push_token(6);
        s.push_token(7);
        s
    }

    #[test]
    fn init_is_deterministic_and_copies_base() {
        let a = ElmModel::<f32>::init(tiny(), 3, None).unwrap();
        let b = ElmModel::<f32>::init(tiny(), 3, None).unwrap();
        assert_eq!(a, b);
        let c = ElmModel::<f32>::init(tiny(), 4, Some(&a)).unwrap();
        for p in a
            .params()
            .iter()
            .filter(|p| !p.name.starts_with(ADAPTER_PREFIX))
        {
            assert_eq!(
                p.value,
                c.params().get(&p.name).unwrap().value,
                "{}",
                p.name
            );
        }
        assert_ne!(
            a.params().digest_prefix(ADAPTER_PREFIX),
            c.params().digest_prefix(ADAPTER_PREFIX)
        );
    }

    #[test]
    fn adapter_must_emit_model_width() {
        let mut cfg = tiny();
        cfg.adapters[0].output_dim = 7;
        assert!(matches!(
            ElmModel::<f32>::init(cfg, 1, None),
            Err(ElmError::Config(_))
        ));
        let mut other = tiny();
        other.d_model = 12;
        other.adapters.iter_mut().for_each(|a| a.output_dim = 12);
        let base = ElmModel::<f32>::init(tiny(), 1, None).unwrap();
        assert!(matches!(
            ElmModel::<f32>::init(other, 1, Some(&base)),
            Err(ElmError::Config(_))
        ));
    }

    #[test]
    fn adapter_is_a_small_share_at_desk_size() {
        let m = ElmModel::<f32>::init(ElmConfig::desk(200), 1, None).unwrap();
        let share = m.params().count_with_prefix(ADAPTER_PREFIX) as f64 / m.params().count() as f64;
        assert!(share < 0.5, "{share}");
        let one = 64 * 128 + 128 + 128 * 64 + 64;
        assert_eq!(m.params().count_with_prefix("adapter.semantic."), one);
    }

    #[test]
    fn token_rows_are_plain_lookups() {
        let m = ElmModel::<f64>::init(tiny(), 2, None).unwrap();
        let x = m
            .embed_mixed(&MixedSequence::tokens(&[1, 4, 4, 8]))
            .unwrap();
        let tok = m.params().get("e0.tok").unwrap().value.clone();
        for (r, id) in [1usize, 4, 4, 8].into_iter().enumerate() {
            assert_eq!(x.row(r), tok.row(id));
        }
    }

    fn set(m: &mut ElmModel<f64>, name: &str, f: impl Fn(usize, &mut [f64])) {
        let i = m.params().index_of(name).unwrap();
        let data = m.params_mut().by_index_mut(i).value.data_mut();
        f(0, data);
    }

    #[test]
    fn identity_adapter_passes_vectors_through() {
        let mut cfg = tiny();
        cfg.adapter_hidden = 8;
        let mut m = ElmModel::<f64>::init(cfg, 2, None).unwrap();
        let shift = 20.0;
        set(&mut m, "adapter.semantic.w1", |_, w| {
            w.iter_mut().for_each(|x| *x = 0.0);
            (0..4).for_each(|i| w[i * 8 + i] = 1.0);
        });
        set(&mut m, "adapter.semantic.b1", |_, b| {
            b.iter_mut().for_each(|x| *x = shift)
        });
        set(&mut m, "adapter.semantic.w2", |_, w| {
            w.iter_mut().for_each(|x| *x = 0.0);
            (0..8).for_each(|i| w[i * 8 + i] = 1.0);
        });
        set(&mut m, "adapter.semantic.b2", |_, b| {
            b.iter_mut().for_each(|x| *x = -shift)
        });
        let w = vec![0.3, -0.2, 0.5, 0.1];
        let x = m.embed_mixed(&seq_with_embed(w.clone())).unwrap();
        let expect = [0.3, -0.2, 0.5, 0.1, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in x.row(2).iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn swapping_an_embedding_changes_one_row() {
        let m = ElmModel::<f64>::init(tiny(), 5, None).unwrap();
        let a = m
            .embed_mixed(&seq_with_embed(vec![0.1, 0.2, 0.3, 0.4]))
            .unwrap();
        let b = m
            .embed_mixed(&seq_with_embed(vec![-0.4, 0.2, 0.9, 0.0]))
            .unwrap();
        for r in 0..a.rows() {
            assert_eq!(r == 2, a.row(r) != b.row(r), "row {r}");
        }
    }

    #[test]
    fn input_errors() {
        let m = ElmModel::<f32>::init(tiny(), 5, None).unwrap();
        let bad_tok = MixedSequence::tokens(&[BOS, 99]);
        assert!(matches!(m.forward_logits(&bad_tok), Err(ElmError::Data(_))));
        let bad_dim = seq_with_embed(vec![0.0; 5]);
        assert!(matches!(
            m.forward_logits(&bad_dim),
            Err(ElmError::Config(_))
        ));
        let too_long = MixedSequence::tokens(&[4; 13]);
        assert!(matches!(
            m.forward_logits(&too_long),
            Err(ElmError::Config(_))
        ));
    }

    #[test]
    fn logits_are_causal() {
        let m = ElmModel::<f64>::init(tiny(), 6, None).unwrap();
        let a = m
            .forward_logits(&seq_with_embed(vec![0.1, 0.2, 0.3, 0.4]))
            .unwrap();
        let mut s = seq_with_embed(vec![0.1, 0.2, 0.3, 0.4]);
        s.elements[4] = Element::Token(8);
        s.push_token(4);
        let b = m.forward_logits(&s).unwrap();
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn batch_matches_single_runs() {
        let m = ElmModel::<f32>::init(tiny(), 6, None).unwrap();
        let s1 = seq_with_embed(vec![0.1, 0.2, 0.3, 0.4]);
        let s2 = MixedSequence::tokens(&[BOS, 4, 4, 5, 6, 7, 8]);
        let (one, _) = m.forward(std::slice::from_ref(&s1)).unwrap();
        assert_eq!(one, m.forward_logits(&s1).unwrap());
        let (both, _) = m.forward(&[s1.clone(), s2.clone()]).unwrap();
        let a = m.forward_logits(&s1).unwrap();
        let b = m.forward_logits(&s2).unwrap();
        let joined: Vec<f32> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in both.data().iter().zip(joined) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    struct ModelProbe {
        model: ElmModel<f64>,
        seqs: Vec<MixedSequence>,
        targets: Vec<usize>,
        mask: Vec<f64>,
    }

    impl GradCheckable for ModelProbe {
        fn params(&self) -> &ParamSet<f64> {
            self.model.params()
        }
        fn params_mut(&mut self) -> &mut ParamSet<f64> {
            self.model.params_mut()
        }
        fn loss(&self) -> crate::Result<f64> {
            self.model.loss(&self.seqs, &self.targets, &self.mask)
        }
        fn loss_and_grads(&self) -> crate::Result<(f64, GradTable<f64>)> {
            self.model
                .loss_and_grads(&self.seqs, &self.targets, &self.mask)
        }
    }

    fn model_probe(seed: u64) -> ModelProbe {
        let mut rng = SplitMix64::stream(seed, "probe");
        let mut model = ElmModel::<f64>::init(tiny(), seed, None).unwrap();
        // Larger weights than the defaults keep every path well away from
        // zero gradients.
        for p in model.params_mut().iter_mut() {
            for x in p.value.data_mut() {
                *x += 0.3 * rng.normal();
            }
        }
        let emb: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut s1 = seq_with_embed(emb);
        s1.push_embed(vec![0.5, -1.0, 0.25], SpaceKind::Behavioral);
        let s2 = MixedSequence::tokens(&[BOS, 4, 5, 6]);
        let n = s1.len() + s2.len();
        let targets = (0..n).map(|_| 2 + rng.below(7)).collect();
        let mask = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        ModelProbe {
            model,
            seqs: vec![s1, s2],
            targets,
            mask,
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut probe = model_probe(11);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 1000);
    }

    #[test]
    fn adapter_gradient_is_nonzero_after_an_embedding() {
        let probe = model_probe(12);
        let (_, g) = probe.loss_and_grads().unwrap();
        assert!(g.max_abs_with_prefix("adapter.semantic.") > 0.0);
        assert!(g.max_abs_with_prefix("adapter.behavioral.") > 0.0);
    }

    #[test]
    fn frozen_groups_have_no_gradient_entries() {
        let mut probe = model_probe(13);
        probe.model.params_mut().train_only(&[ADAPTER_PREFIX]);
        let (_, g) = probe.loss_and_grads().unwrap();
        assert!(g.iter().all(|(n, _)| n.starts_with(ADAPTER_PREFIX)));
        assert_eq!(g.len(), 8);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn greedy_decoding_is_repeatable() {
        let m = ElmModel::<f32>::init(tiny(), 9, None).unwrap();
        let prompt = seq_with_embed(vec![0.1, 0.2, 0.3, 0.4]);
        let a = decode_tokens(&m, &prompt, 5, DecodeMode::Greedy).unwrap();
        let b = decode_tokens(&m, &prompt, 5, DecodeMode::Greedy).unwrap();
        let c = decode_tokens(
            &m,
            &prompt,
            5,
            DecodeMode::Temperature { tau: 0.0, seed: 1 },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.tokens.len() <= 5);
        assert!(a.tokens.iter().all(|&t| t != PAD && t != BOS && t != UNK));
        // The budget is clipped to the context.
        let long = decode_tokens(&m, &prompt, 100, DecodeMode::Greedy).unwrap();
        assert!(long.tokens.len() + prompt.len() <= 12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::build(["a b c d e"], 10).unwrap();
        let model = ElmModel::<f32>::init(tiny(), 9, None).unwrap();
        let mut opt = crate::nn::AdamState::new(model.params());
        opt.step = 3;
        opt.m[0].data_mut()[0] = 0.5;
        let ck = Checkpoint {
            model,
            vocab,
            stage: "base".into(),
            seed: 9,
            step: 3,
            optimizer: Some(opt),
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let d1 = checkpoint_digest(dir.path()).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(d1, checkpoint_digest(dir.path()).unwrap());
        let mut bytes = std::fs::read(dir.path().join("params.bin")).unwrap();
        bytes[0] ^= 1;
        std::fs::write(dir.path().join("params.bin"), bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(ElmError::Format(_))
        ));
    }
}

use std::collections::BTreeMap;

use super::vocab::{Vocab, BOS, EOS, PAD};
use crate::embed::{EmbeddingTable, SpaceKind};
use crate::error::{ElmError, Result};
use crate::world::{Sentinel, TaskInstance};

/// One input position: a vocabulary token or a domain embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Token(usize),
    Embed { vector: Vec<f64>, space: SpaceKind },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixedSequence {
    pub elements: Vec<Element>,
}

impl MixedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(ids: &[usize]) -> Self {
        MixedSequence {
            elements: ids.iter().map(|&i| Element::Token(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_token(&mut self, id: usize) {
        self.elements.push(Element::Token(id));
    }

    pub fn push_embed(&mut self, vector: Vec<f64>, space: SpaceKind) {
        self.elements.push(Element::Embed { vector, space });
    }
}

/// Embedding tables by space kind.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTables {
    tables: BTreeMap<SpaceKind, EmbeddingTable>,
}

impl EmbeddingTables {
    pub fn new(tables: impl IntoIterator<Item = EmbeddingTable>) -> Self {
        EmbeddingTables {
            tables: tables.into_iter().map(|t| (t.space, t)).collect(),
        }
    }

    pub fn get(&self, space: SpaceKind) -> Option<&EmbeddingTable> {
        self.tables.get(&space)
    }

    /// Vector of a sentinel; a missing id is a data error naming it.
    pub fn resolve(&self, s: &Sentinel) -> Result<Vec<f64>> {
        let table = self
            .get(s.space)
            .ok_or_else(|| ElmError::data(format!("no {} embedding table loaded", s.space)))?;
        table.require(&s.id).map(<[f64]>::to_vec)
    }
}

/// `[BOS]` followed by the prompt text, with every sentinel replaced by one
/// embedding position holding the vector returned by `resolve`.
pub fn build_prompt(
    vocab: &Vocab,
    input: &str,
    mut resolve: impl FnMut(&Sentinel) -> Result<Vec<f64>>,
) -> Result<MixedSequence> {
    let mut seq = MixedSequence::new();
    seq.push_token(BOS);
    for part in Sentinel::split(input)? {
        match part {
            Ok(text) => vocab
                .encode(text)
                .into_iter()
                .for_each(|t| seq.push_token(t)),
            Err(s) => {
                let v = resolve(&s)?;
                seq.push_embed(v, s.space);
            }
        }
    }
    Ok(seq)
}

/// A training sequence with next-token targets and loss mask, one per
/// position. Only positions predicting target tokens or the closing EOS
/// carry weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: MixedSequence,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

impl Example {
    pub fn from_prompt(prompt: MixedSequence, target: &[usize]) -> Self {
        let mut seq = prompt;
        let prompt_len = seq.len();
        target.iter().for_each(|&t| seq.push_token(t));
        seq.push_token(EOS);
        let n = seq.len();
        let mut targets = vec![PAD; n];
        let mut mask = vec![0.0; n];
        for i in (prompt_len - 1)..(n - 1) {
            if let Element::Token(t) = seq.elements[i + 1] {
                targets[i] = t;
                mask[i] = 1.0;
            }
        }
        Example { seq, targets, mask }
    }

    /// Plain language-model example: `[BOS] text [EOS]`, all positions
    /// weighted.
    pub fn from_text(vocab: &Vocab, text: &str) -> Self {
        Self::from_prompt(MixedSequence::tokens(&[BOS]), &vocab.encode(text))
    }

    pub fn from_instance(
        vocab: &Vocab,
        tables: &EmbeddingTables,
        inst: &TaskInstance,
    ) -> Result<Self> {
        let prompt = build_prompt(vocab, &inst.input, |s| tables.resolve(s))?;
        Ok(Self::from_prompt(prompt, &vocab.encode(&inst.target)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["describe the item . witty ; tense"], 64).unwrap()
    }

    #[test]
    fn prompt_places_one_embedding_position() {
        let v = vocab();
        let seq = build_prompt(
            &v,
            "Describe the item ⟨EMB:item_0001|semantic⟩.",
            |_| Ok(vec![0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(seq.len(), 6);
        assert!(matches!(seq.elements[4], Element::Embed { .. }));
        assert_eq!(seq.elements[5], Element::Token(v.id(".").unwrap()));
    }

    #[test]
    fn mask_covers_target_and_eos_only() {
        let v = vocab();
        let prompt = MixedSequence::tokens(&[BOS, 4, 5]);
        let ex = Example::from_prompt(prompt, &[6, 7]);
        assert_eq!(ex.seq.len(), 6);
        assert_eq!(ex.mask, vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(&ex.targets[2..5], &[6, 7, EOS]);
        let _ = v;
    }

    #[test]
    fn missing_id_is_named() {
        let tables = EmbeddingTables::new([EmbeddingTable::new(
            SpaceKind::Semantic,
            2,
            vec![("item_0001".into(), vec![1.0, 0.0])],
        )
        .unwrap()]);
        let inst = TaskInstance {
            task: "summary".into(),
            input: "the item ⟨EMB:item_0999|semantic⟩ .".into(),
            target: "witty .".into(),
        };
        let err = Example::from_instance(&vocab(), &tables, &inst).unwrap_err();
        assert!(matches!(err, ElmError::Data(_)));
        assert!(err.to_string().contains("item_0999"));
    }
}

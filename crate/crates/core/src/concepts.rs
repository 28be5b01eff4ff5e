//! Named concept vocabulary: the rows of the concept matrix.

use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::path::Path;

/// The default 18-concept vocabulary used when none is supplied.
pub const DEFAULT_CONCEPT_NAMES: [&str; 18] = [
    "holocaust",
    "nazism",
    "genocide",
    "funny",
    "anti-muslim",
    "terrorism",
    "violence",
    "politics",
    "racism",
    "international-relation",
    "adult",
    "gore",
    "misogynistic",
    "immigration",
    "extremism",
    "immoral",
    "white-supremacy",
    "indecency",
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub embedding: Vec<f64>,
}

/// `n` named concepts with embedding vectors of a shared dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConceptVocabulary {
    pub dim: usize,
    pub concepts: Vec<Concept>,
}

impl ConceptVocabulary {
    pub fn new(dim: usize, concepts: Vec<Concept>) -> CoreResult<Self> {
        let v = ConceptVocabulary { dim, concepts };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> CoreResult<()> {
        if self.concepts.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "vocabulary needs at least 2 concepts".into(),
            ));
        }
        let mut names = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if c.id != i {
                return Err(CoreError::InvalidConfig(format!(
                    "concept ids must be contiguous: slot {i} holds id {}",
                    c.id
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(CoreError::InvalidConfig(format!(
                    "duplicate concept name {:?}",
                    c.name
                )));
            }
            if c.embedding.len() != self.dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "concept {} embedding has {} dims, vocabulary says {}",
                    c.id,
                    c.embedding.len(),
                    self.dim
                )));
            }
            if !c.embedding.iter().all(|v| v.is_finite()) {
                return Err(CoreError::InvalidConfig(format!(
                    "concept {} embedding is not finite",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.concepts[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.concepts[id].embedding
    }

    /// Concept embeddings stacked as an `[n, dim]` matrix.
    pub fn matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.concepts.iter().map(|c| c.embedding.clone()).collect();
        Tensor::from_rows(&rows).expect("validated embeddings")
    }

    /// Replace all embeddings from the rows of an `[n, dim]` matrix.
    pub fn with_matrix(&self, m: &Tensor) -> CoreResult<ConceptVocabulary> {
        if m.rows() != self.len() || m.cols() != self.dim {
            return Err(CoreError::DimensionMismatch(format!(
                "matrix {:?} vs vocabulary [{}, {}]",
                m.shape(),
                self.len(),
                self.dim
            )));
        }
        let concepts = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| Concept {
                id: c.id,
                name: c.name.clone(),
                embedding: m.row_slice(i).to_vec(),
            })
            .collect();
        ConceptVocabulary::new(self.dim, concepts)
    }

    /// Default names for `n` concepts: the standard list when `n == 18`,
    /// otherwise synthetic `concept-i` names.
    pub fn default_names(n: usize) -> Vec<String> {
        if n == DEFAULT_CONCEPT_NAMES.len() {
            DEFAULT_CONCEPT_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..n).map(|i| format!("concept-{i}")).collect()
        }
    }

    pub fn save(&self, path: &Path) -> CoreResult<()> {
        let json = serde_json::to_string_pretty(self)?;
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(json.as_bytes()).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> CoreResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let v: ConceptVocabulary = serde_json::from_reader(BufReader::new(f))?;
        v.validate()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConceptVocabulary {
        ConceptVocabulary::new(
            2,
            vec![
                Concept {
                    id: 0,
                    name: "a".into(),
                    embedding: vec![1.0, 0.0],
                },
                Concept {
                    id: 1,
                    name: "b".into(),
                    embedding: vec![0.0, 1.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = ConceptVocabulary::new(
            1,
            vec![
                Concept {
                    id: 0,
                    name: "x".into(),
                    embedding: vec![1.0],
                },
                Concept {
                    id: 1,
                    name: "x".into(),
                    embedding: vec![2.0],
                },
            ],
        );
        assert!(err.is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let v = tiny();
        let m = v.matrix();
        let v2 = v.with_matrix(&m).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn default_names_cover_both_cases() {
        assert_eq!(ConceptVocabulary::default_names(18)[0], "holocaust");
        assert_eq!(ConceptVocabulary::default_names(3)[2], "concept-2");
    }
}

//! A feature file and its annotation CSV, joined by sample id.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use transaction_core::data::{ActionSpace, ModalitySample, Split, TailRule, Vocab};

use crate::annotations::{self, Annotation};
use crate::error::{AppError, Result};
use crate::features::{self, FeatureHeader, FeatureRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: FeatureHeader,
    pub samples: Vec<ModalitySample>,
    pub space: ActionSpace,
}

impl Dataset {
    /// Joins records with annotations. Every annotation needs a feature record
    /// and every record needs exactly one annotation. When `vocab` is `None`
    /// the smallest covering vocabulary is used.
    pub fn assemble(
        header: FeatureHeader,
        records: Vec<FeatureRecord>,
        rows: &[Annotation],
        vocab: Option<Vocab>,
        tail: TailRule,
    ) -> Result<Self> {
        let mut by_id: BTreeMap<&str, &Annotation> = BTreeMap::new();
        for a in rows {
            if by_id.insert(&a.sample_id, a).is_some() {
                return Err(AppError::Data(format!("sample `{}` is annotated more than once", a.sample_id)));
            }
        }
        let record_ids: BTreeSet<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
        if record_ids.len() != records.len() {
            return Err(AppError::Data("feature file repeats a sample id".into()));
        }
        if let Some(a) = rows.iter().find(|a| !record_ids.contains(a.sample_id.as_str())) {
            return Err(AppError::Data(format!(
                "dangling annotation: sample `{}` has no features",
                a.sample_id
            )));
        }
        if let Some(r) = records.iter().find(|r| !by_id.contains_key(r.sample_id.as_str())) {
            return Err(AppError::Data(format!("sample `{}` has features but no annotation", r.sample_id)));
        }

        let samples: Vec<ModalitySample> = records
            .into_iter()
            .map(|r| {
                let a = by_id[r.sample_id.as_str()];
                ModalitySample {
                    sample_id: r.sample_id,
                    rgb: r.rgb,
                    flow: r.flow,
                    obj: r.obj,
                    verb: a.verb,
                    noun: a.noun,
                    action: a.action,
                    participant_id: a.participant.clone(),
                    split: a.split,
                }
            })
            .collect();
        let covering = Vocab::covering(&samples);
        let vocab = match vocab {
            Some(v) => {
                if v.n_verbs < covering.n_verbs || v.n_nouns < covering.n_nouns || v.n_actions < covering.n_actions {
                    return Err(AppError::Data(format!(
                        "labels need at least {} verbs, {} nouns and {} actions; configured {}/{}/{}",
                        covering.n_verbs, covering.n_nouns, covering.n_actions, v.n_verbs, v.n_nouns, v.n_actions
                    )));
                }
                v
            }
            None => covering,
        };
        let space = ActionSpace::build(&samples, vocab, tail).map_err(|e| AppError::Data(e.to_string()))?;
        Ok(Dataset { header, samples, space })
    }

    pub fn load(features_path: &Path, annotations_path: &Path, vocab: Option<Vocab>, tail: TailRule) -> Result<Self> {
        let (header, records) = features::read(features_path)?;
        let rows = annotations::read(annotations_path)?;
        Self::assemble(header, records, &rows, vocab, tail)
    }

    pub fn split(&self, split: Split) -> Vec<&ModalitySample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn records(&self) -> Vec<FeatureRecord> {
        self.samples
            .iter()
            .map(record_of).collect()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.samples.iter().map(annotation_of).collect()
    }

    pub fn write(&self, features_path: &Path, annotations_path: &Path) -> Result<()> {
        write_dataset(features_path, annotations_path, &self.header, &self.samples)
    }
}

pub fn record_of(s: &ModalitySample) -> FeatureRecord {
    FeatureRecord {
        sample_id: s.sample_id.clone(),
        rgb: s.rgb.clone(),
        flow: s.flow.clone(),
        obj: s.obj.clone(),
    }
}

pub fn annotation_of(s: &ModalitySample) -> Annotation {
    Annotation {
        sample_id: s.sample_id.clone(),
        participant: s.participant_id.clone(),
        verb: s.verb,
        noun: s.noun,
        action: s.action,
        split: s.split,
    }
}

pub fn write_dataset(
    features_path: &Path,
    annotations_path: &Path,
    header: &FeatureHeader,
    samples: &[ModalitySample],
) -> Result<()> {
    let records: Vec<FeatureRecord> = samples.iter().map(record_of).collect();
    features::write(features_path, header, &records)?;
    let rows: Vec<Annotation> = samples.iter().map(annotation_of).collect();
    annotations::write(annotations_path, &rows)
}

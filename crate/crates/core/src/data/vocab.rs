use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{segment::time_slice, SubTrajectory};
use crate::error::{Result, TulError};

/// Index reserved for POIs and categories unseen during training.
pub const OOV_INDEX: usize = 0;

/// Dense index spaces for POIs, categories, time slices and users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    pois: Vec<String>,
    categories: Vec<String>,
    users: Vec<String>,
    num_time_slices: usize,
    poi_index: HashMap<String, usize>,
    category_index: HashMap<String, usize>,
    user_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    pois: Vec<String>,
    categories: Vec<String>,
    users: Vec<String>,
    num_time_slices: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.pois, r.categories, r.users, r.num_time_slices)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            pois: v.pois,
            categories: v.categories,
            users: v.users,
            num_time_slices: v.num_time_slices,
        }
    }
}

fn index_of(items: &[String], offset: usize) -> HashMap<String, usize> {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i + offset))
        .collect()
}

impl Vocabulary {
    /// `pois` and `categories` exclude the OOV slot; `users` is the label space.
    pub fn from_parts(
        pois: Vec<String>,
        categories: Vec<String>,
        users: Vec<String>,
        num_time_slices: usize,
    ) -> Self {
        Self {
            poi_index: index_of(&pois, 1),
            category_index: index_of(&categories, 1),
            user_index: index_of(&users, 0),
            pois,
            categories,
            users,
            num_time_slices,
        }
    }

    /// Size of the POI index space including the OOV slot.
    pub fn num_pois(&self) -> usize {
        self.pois.len() + 1
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_time_slices(&self) -> usize {
        self.num_time_slices
    }

    pub fn poi(&self, id: &str) -> usize {
        self.poi_index.get(id).copied().unwrap_or(OOV_INDEX)
    }

    pub fn category(&self, id: &str) -> usize {
        self.category_index.get(id).copied().unwrap_or(OOV_INDEX)
    }

    pub fn slice(&self, timestamp: i64) -> usize {
        time_slice(timestamp, self.num_time_slices)
    }

    pub fn user(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.users.get(index).map(String::as_str)
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    /// SHA-256 over the serialized index spaces.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, list) in [("P", &self.pois), ("C", &self.categories), ("U", &self.users)] {
            h.update(tag.as_bytes());
            for s in list {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
        h.update((self.num_time_slices as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary from training trajectories. POIs and categories are
/// indexed by first occurrence starting at 1; users by first occurrence from 0.
pub fn build_vocab(train: &[SubTrajectory], num_time_slices: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(TulError::Data("cannot build a vocabulary from an empty training set".into()));
    }
    if num_time_slices == 0 || 86_400 % num_time_slices != 0 {
        return Err(TulError::Config(format!(
            "num_time_slices must divide 86400, got {num_time_slices}"
        )));
    }
    let mut pois = Vec::new();
    let mut categories = Vec::new();
    let mut users = Vec::new();
    let mut seen_p = HashMap::new();
    let mut seen_c = HashMap::new();
    let mut seen_u = HashMap::new();
    for t in train {
        if seen_u.insert(t.user_id.clone(), ()).is_none() {
            users.push(t.user_id.clone());
        }
        for r in &t.records {
            if seen_p.insert(r.poi_id.clone(), ()).is_none() {
                pois.push(r.poi_id.clone());
            }
            if seen_c.insert(r.category_id.clone(), ()).is_none() {
                categories.push(r.category_id.clone());
            }
        }
    }
    Ok(Vocabulary::from_parts(pois, categories, users, num_time_slices))
}

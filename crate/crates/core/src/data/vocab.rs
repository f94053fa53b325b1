use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sample::QType;

pub const PAD: &str = "<pad>";

const WORDS: [&str; 14] = [
    PAD, "is", "there", "a", "cell", "how", "many", "cells", "more", "than", "red", "green", "blue", "yellow",
];

/// Cell colors and their RGB values, indexed like the color words.
pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
];

/// Fixed word list; id 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            words: WORDS.iter().enumerate().map(|(i, w)| (w.to_string(), i)).collect(),
        }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.iter().find(|(_, &i)| i == id).map(|(w, _)| w.as_str())
    }

    fn ids(&self, words: &[&str]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.id(w).expect("template word in vocabulary"))
            .collect()
    }

    /// Question tokens for `qtype` about `color` (and `other` for comparisons).
    pub fn question(&self, qtype: QType, color: usize, other: usize) -> Vec<usize> {
        let c = COLORS[color].0;
        match qtype {
            QType::Presence => self.ids(&["is", "there", "a", c, "cell"]),
            QType::Count => self.ids(&["how", "many", c, "cells"]),
            QType::Comparison => self.ids(&["more", c, "than", COLORS[other].0]),
        }
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

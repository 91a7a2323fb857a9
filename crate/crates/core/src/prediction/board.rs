use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Role;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Card {
    pub id: String,
    pub caption: String,
    #[serde(default)]
    pub role_hint: Option<Role>,
    #[serde(default)]
    pub pictogram: Option<String>,
    #[serde(default)]
    pub folder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Folder {
    pub name: String,
    pub cards: Vec<String>,
}

/// A user's communication board. Folders are navigation only; prediction
/// ranks over every card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub name: String,
    pub cards: Vec<Card>,
    #[serde(default)]
    pub folders: Vec<Folder>,
}

impl Board {
    pub fn new(name: impl Into<String>, cards: Vec<Card>, folders: Vec<Folder>) -> Result<Self> {
        let board = Board {
            name: name.into(),
            cards,
            folders,
        };
        board.validate()?;
        Ok(board)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cards.is_empty() {
            return Err(Error::Config("board has no cards".into()));
        }
        let mut seen = HashSet::new();
        for card in &self.cards {
            if !seen.insert(card.id.as_str()) {
                return Err(Error::Config(format!("duplicate card id `{}`", card.id)));
            }
            if card.caption.trim().is_empty() {
                return Err(Error::Config(format!("card `{}` has an empty caption", card.id)));
            }
        }
        for folder in &self.folders {
            if let Some(missing) = folder.cards.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(Error::Config(format!(
                    "folder `{}` references unknown card `{missing}`",
                    folder.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let board: Board = serde_json::from_str(text)?;
        board.validate()?;
        Ok(board)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn card(&self, id: &str) -> Option<&Card> {
        self.cards.iter().find(|c| c.id == id)
    }

    /// The card whose caption is `phrase`. When several match, one hinted
    /// with `role` wins, then the smallest id.
    pub fn card_for_phrase(&self, phrase: &str, role: Option<Role>) -> Option<&Card> {
        let phrase = phrase.to_lowercase();
        self.cards
            .iter()
            .filter(|c| c.caption.to_lowercase() == phrase)
            .min_by(|a, b| {
                let hinted = |c: &Card| role.is_some() && c.role_hint == role;
                hinted(b).cmp(&hinted(a)).then_with(|| a.id.cmp(&b.id))
            })
    }

    /// Captions with two or three words, in board order and without repeats.
    pub fn multiword_captions(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.cards
            .iter()
            .map(|c| c.caption.to_lowercase())
            .filter(|c| (2..=3).contains(&c.split_whitespace().count()))
            .filter(|c| seen.insert(c.clone()))
            .collect()
    }
}

//! Benchmark item inventory: loading, validation, and directional recoding.
//!
//! An [`ItemBank`] holds the agree/disagree test prompts together with the
//! recode list that flips left-keyed items, so that after recoding a high
//! ordinal code uniformly indicates agreement with right-keyed content.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the two ideological dimensions an item nominally probes.
///
/// The pipeline scores one combined scale; the subscale is carried as
/// metadata for item reports and user-defined splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subscale {
    Economic,
    Social,
}

/// One test prompt with its scoring metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// 1-based position in the bank.
    pub id: u32,
    pub text: String,
    pub subscale: Subscale,
    /// True exactly when the id appears in the bank's recode list.
    pub reverse_coded: bool,
    pub tags: Vec<String>,
}

/// One cell of a response matrix.
///
/// `Missing` marks an absent record and is distinct from an observed
/// refusal (`Pna`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseCategory {
    #[serde(rename = "SA")]
    StronglyAgree,
    #[serde(rename = "A")]
    Agree,
    #[serde(rename = "D")]
    Disagree,
    #[serde(rename = "SD")]
    StronglyDisagree,
    #[serde(rename = "PNA")]
    Pna,
    #[serde(rename = "MISSING")]
    Missing,
}

impl ResponseCategory {
    /// Ordinal code of an answered category (SD=0 < D=1 < A=2 < SA=3),
    /// before any recoding. `None` for PNA and MISSING.
    pub fn ordinal_code(self) -> Option<u8> {
        match self {
            ResponseCategory::StronglyDisagree => Some(0),
            ResponseCategory::Disagree => Some(1),
            ResponseCategory::Agree => Some(2),
            ResponseCategory::StronglyAgree => Some(3),
            ResponseCategory::Pna | ResponseCategory::Missing => None,
        }
    }

    /// Inverse of [`ordinal_code`](Self::ordinal_code).
    pub fn from_ordinal(code: u8) -> Option<Self> {
        match code {
            0 => Some(ResponseCategory::StronglyDisagree),
            1 => Some(ResponseCategory::Disagree),
            2 => Some(ResponseCategory::Agree),
            3 => Some(ResponseCategory::StronglyAgree),
            _ => None,
        }
    }

    /// True for the four substantive agreement levels.
    pub fn is_answered(self) -> bool {
        self.ordinal_code().is_some()
    }

    /// Short label used in CSV files.
    pub fn label(self) -> &'static str {
        match self {
            ResponseCategory::StronglyAgree => "SA",
            ResponseCategory::Agree => "A",
            ResponseCategory::Disagree => "D",
            ResponseCategory::StronglyDisagree => "SD",
            ResponseCategory::Pna => "PNA",
            ResponseCategory::Missing => "MISSING",
        }
    }
}

impl fmt::Display for ResponseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ResponseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SA" => Ok(ResponseCategory::StronglyAgree),
            "A" => Ok(ResponseCategory::Agree),
            "D" => Ok(ResponseCategory::Disagree),
            "SD" => Ok(ResponseCategory::StronglyDisagree),
            "PNA" => Ok(ResponseCategory::Pna),
            "MISSING" => Ok(ResponseCategory::Missing),
            other => Err(Error::InvalidCategory(other.to_string())),
        }
    }
}

/// Serialized form of one item in the bank file (no derived fields).
#[derive(Debug, Serialize, Deserialize)]
struct RawItem {
    id: u32,
    text: String,
    subscale: Subscale,
    tags: Vec<String>,
}

/// On-disk bank format: `{version, items, recode_ids}`.
#[derive(Debug, Serialize, Deserialize)]
struct RawBank {
    version: String,
    items: Vec<RawItem>,
    recode_ids: Vec<u32>,
}

/// A validated, immutable item inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemBank {
    version: String,
    items: Vec<Item>,
    recode_ids: BTreeSet<u32>,
}

const BUILTIN_BANK_JSON: &str = include_str!("../data/items.json");

impl ItemBank {
    /// The bundled 105-item inventory.
    pub fn builtin() -> ItemBank {
        ItemBank::from_json(BUILTIN_BANK_JSON).expect("bundled bank is valid")
    }

    /// Parse and validate a bank from its JSON representation.
    pub fn from_json(json: &str) -> Result<ItemBank> {
        let raw: RawBank =
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("bank json: {e}")))?;
        ItemBank::from_raw(raw)
    }

    /// Load a bank file from disk.
    pub fn from_path(path: &Path) -> Result<ItemBank> {
        let text = std::fs::read_to_string(path)?;
        ItemBank::from_json(&text)
    }

    fn from_raw(raw: RawBank) -> Result<ItemBank> {
        if raw.items.is_empty() {
            return Err(Error::Validation("bank has no items".into()));
        }
        let n = raw.items.len() as u32;

        let mut seen = BTreeSet::new();
        for item in &raw.items {
            if !seen.insert(item.id) {
                return Err(Error::Validation(format!("duplicate item id {}", item.id)));
            }
            if item.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "item {} has empty text",
                    item.id
                )));
            }
        }
        // ids must form exactly 1..=N
        if seen.first() != Some(&1) || seen.last() != Some(&n) {
            return Err(Error::Validation(format!(
                "item ids must form a contiguous 1..{n} range"
            )));
        }

        let recode_ids: BTreeSet<u32> = raw.recode_ids.iter().copied().collect();
        if let Some(&bad) = recode_ids.iter().find(|&&id| id == 0 || id > n) {
            return Err(Error::Validation(format!(
                "recode id {bad} outside item range 1..{n}"
            )));
        }

        let mut items: Vec<Item> = raw
            .items
            .into_iter()
            .map(|r| Item {
                reverse_coded: recode_ids.contains(&r.id),
                id: r.id,
                text: r.text,
                subscale: r.subscale,
                tags: r.tags,
            })
            .collect();
        items.sort_by_key(|i| i.id);

        Ok(ItemBank {
            version: raw.version,
            items,
            recode_ids,
        })
    }

    /// Serialize to the bank file format.
    pub fn to_json(&self) -> String {
        let raw = RawBank {
            version: self.version.clone(),
            items: self
                .items
                .iter()
                .map(|i| RawItem {
                    id: i.id,
                    text: i.text.clone(),
                    subscale: i.subscale,
                    tags: i.tags.clone(),
                })
                .collect(),
            recode_ids: self.recode_ids.iter().copied().collect(),
        };
        let mut out = serde_json::to_string_pretty(&raw).expect("bank serializes");
        out.push('\n');
        out
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Items in id order.
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    /// Look up an item by its 1-based id.
    pub fn item(&self, id: u32) -> Option<&Item> {
        // ids are contiguous 1..=N in sorted order
        self.items.get(id.checked_sub(1)? as usize)
    }

    pub fn recode_ids(&self) -> &BTreeSet<u32> {
        &self.recode_ids
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Apply directional recoding: for a reverse-coded item the ordinal scale is
/// flipped (`code -> 3 - code`); PNA is direction-free and passes through.
///
/// MISSING is not an observable response and is rejected.
pub fn recode_category(item: &Item, cat: ResponseCategory) -> Result<ResponseCategory> {
    if cat == ResponseCategory::Missing {
        return Err(Error::InvalidCategory(
            "MISSING cannot be recoded".to_string(),
        ));
    }
    match cat.ordinal_code() {
        Some(code) if item.reverse_coded => {
            Ok(ResponseCategory::from_ordinal(3 - code).expect("code in 0..=3"))
        }
        _ => Ok(cat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bank(recode: &[u32]) -> ItemBank {
        let json = serde_json::json!({
            "version": "test",
            "items": [
                {"id": 1, "text": "one", "subscale": "social", "tags": []},
                {"id": 2, "text": "two", "subscale": "economic", "tags": []},
                {"id": 3, "text": "three", "subscale": "social", "tags": []},
            ],
            "recode_ids": recode,
        });
        ItemBank::from_json(&json.to_string()).unwrap()
    }

    #[test]
    fn builtin_bank_has_expected_shape() {
        let bank = ItemBank::builtin();
        assert_eq!(bank.len(), 105);
        let expected: BTreeSet<u32> = [
            8, 9, 10, 11, 12, 13, 14, 15, 17, 18, 19, 21, 23, 24, 26, 28, 29, 30, 31, 32, 33, 35,
            36, 38, 39, 41, 46, 47, 48, 49, 58, 59, 60, 64, 68, 70, 71, 72, 73, 74, 75, 76, 78, 79,
            80, 81, 89, 90, 92, 93, 94, 98, 103,
        ]
        .into_iter()
        .collect();
        assert_eq!(bank.recode_ids(), &expected);
        for item in bank.items() {
            assert_eq!(item.reverse_coded, expected.contains(&item.id));
            assert!(!item.text.trim().is_empty());
        }
    }

    #[test]
    fn recode_flag_set_only_for_listed_ids() {
        let bank = tiny_bank(&[2]);
        assert!(!bank.item(1).unwrap().reverse_coded);
        assert!(bank.item(2).unwrap().reverse_coded);
        assert!(!bank.item(3).unwrap().reverse_coded);
    }

    #[test]
    fn duplicate_id_rejected() {
        let json = serde_json::json!({
            "version": "test",
            "items": [
                {"id": 7, "text": "a", "subscale": "social", "tags": []},
                {"id": 7, "text": "b", "subscale": "social", "tags": []},
            ],
            "recode_ids": [],
        });
        let err = ItemBank::from_json(&json.to_string()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn noncontiguous_ids_rejected() {
        let json = serde_json::json!({
            "version": "test",
            "items": [
                {"id": 1, "text": "a", "subscale": "social", "tags": []},
                {"id": 3, "text": "b", "subscale": "social", "tags": []},
            ],
            "recode_ids": [],
        });
        assert!(ItemBank::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn empty_text_rejected() {
        let json = serde_json::json!({
            "version": "test",
            "items": [{"id": 1, "text": "  ", "subscale": "social", "tags": []}],
            "recode_ids": [],
        });
        assert!(ItemBank::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn recode_id_out_of_range_rejected() {
        let json = serde_json::json!({
            "version": "test",
            "items": [{"id": 1, "text": "a", "subscale": "social", "tags": []}],
            "recode_ids": [2],
        });
        assert!(ItemBank::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn recode_flips_answered_categories() {
        let bank = tiny_bank(&[2]);
        let rev = bank.item(2).unwrap();
        let plain = bank.item(1).unwrap();
        assert_eq!(
            recode_category(rev, ResponseCategory::StronglyAgree).unwrap(),
            ResponseCategory::StronglyDisagree
        );
        assert_eq!(
            recode_category(rev, ResponseCategory::Pna).unwrap(),
            ResponseCategory::Pna
        );
        assert_eq!(
            recode_category(plain, ResponseCategory::StronglyAgree).unwrap(),
            ResponseCategory::StronglyAgree
        );
        assert!(recode_category(rev, ResponseCategory::Missing).is_err());
    }

    #[test]
    fn bank_round_trips_through_json() {
        let bank = ItemBank::builtin();
        let again = ItemBank::from_json(&bank.to_json()).unwrap();
        assert_eq!(bank, again);
    }

    proptest::proptest! {
        #[test]
        fn recode_is_an_involution(code in 0u8..4, reversed in proptest::bool::ANY) {
            let item = Item {
                id: 1,
                text: "x".into(),
                subscale: Subscale::Social,
                reverse_coded: reversed,
                tags: vec![],
            };
            let cat = ResponseCategory::from_ordinal(code).unwrap();
            let once = recode_category(&item, cat).unwrap();
            let twice = recode_category(&item, once).unwrap();
            proptest::prop_assert_eq!(twice, cat);
            if !reversed {
                proptest::prop_assert_eq!(once, cat);
            }
        }
    }
}

//! Response ingestion and matrix construction for the two IRT stages.
//!
//! A [`ResponseMatrix`] holds the raw categorical grid; [`binarize_pna`]
//! projects it to the stage-1 refusal indicator and [`filter_answered`] to the
//! stage-2 recoded ordinal codes.
//!
//! [`binarize_pna`]: ResponseMatrix::binarize_pna
//! [`filter_answered`]: ResponseMatrix::filter_answered

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bank::{recode_category, ItemBank, ResponseCategory};
use crate::error::{Error, Result};

/// One ingested response record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub respondent_id: String,
    pub group: String,
    pub item_id: u32,
    pub category: ResponseCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

/// A matrix row owner: one model run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    pub group: String,
}

/// Respondents × bank items grid of raw categories. Cells without a record
/// are MISSING.
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    bank: Arc<ItemBank>,
    respondents: Vec<Respondent>,
    /// Row-major: `cells[r * n_items + c]`.
    cells: Vec<ResponseCategory>,
}

/// Stage-1 view: `Some(true)` = PNA, `Some(false)` = answered, `None` =
/// MISSING.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    pub respondents: Vec<Respondent>,
    pub item_ids: Vec<u32>,
    cells: Vec<Option<bool>>,
}

/// Stage-2 view: recoded ordinal codes 0..=3; PNA and MISSING cells are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalMatrix {
    pub respondents: Vec<Respondent>,
    pub item_ids: Vec<u32>,
    cells: Vec<Option<u8>>,
}

/// Key choice for [`ResponseMatrix::pna_rates`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Respondent,
    Group,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    respondent_id: String,
    group: String,
    item_id: u32,
    category: String,
    #[serde(default)]
    raw_text: Option<String>,
}

/// Parse response records from CSV (`respondent_id,group,item_id,category
/// [,raw_text]`).
pub fn parse_response_csv<R: Read>(reader: R) -> Result<Vec<ResponseRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut records = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Parse(format!("response csv: {e}")))?;
        records.push(ResponseRecord {
            respondent_id: row.respondent_id,
            group: row.group,
            item_id: row.item_id,
            category: row.category.parse()?,
            raw_text: row.raw_text.filter(|t| !t.is_empty()),
        });
    }
    Ok(records)
}

/// Parse response records from JSONL (one record object per line).
pub fn parse_response_jsonl<R: Read>(reader: R) -> Result<Vec<ResponseRecord>> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("response jsonl line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Read a response file, dispatching on extension (`.jsonl`/`.ndjson` vs
/// CSV), and build the matrix.
pub fn ingest_responses(path: &Path, bank: Arc<ItemBank>) -> Result<ResponseMatrix> {
    let file = std::fs::File::open(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let records = if matches!(ext, "jsonl" | "ndjson") {
        parse_response_jsonl(file)?
    } else {
        parse_response_csv(file)?
    };
    ResponseMatrix::from_records(records, bank)
}

impl ResponseMatrix {
    /// Assemble a matrix from records. Rows appear in first-record order;
    /// duplicate (respondent, item) pairs and unknown items are rejected.
    pub fn from_records(records: Vec<ResponseRecord>, bank: Arc<ItemBank>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyData);
        }
        let n_items = bank.len();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut respondents: Vec<Respondent> = Vec::new();
        let mut cells: Vec<ResponseCategory> = Vec::new();

        for rec in records {
            if rec.category == ResponseCategory::Missing {
                return Err(Error::InvalidCategory(
                    "MISSING cannot be ingested; omit the record instead".into(),
                ));
            }
            if bank.item(rec.item_id).is_none() {
                return Err(Error::UnknownItem(rec.item_id));
            }
            let row = match index.get(&rec.respondent_id) {
                Some(&row) => {
                    if respondents[row].group != rec.group {
                        return Err(Error::Validation(format!(
                            "respondent {} appears under groups {} and {}",
                            rec.respondent_id, respondents[row].group, rec.group
                        )));
                    }
                    row
                }
                None => {
                    let row = respondents.len();
                    index.insert(rec.respondent_id.clone(), row);
                    respondents.push(Respondent {
                        id: rec.respondent_id.clone(),
                        group: rec.group.clone(),
                    });
                    cells.extend(std::iter::repeat_n(ResponseCategory::Missing, n_items));
                    row
                }
            };
            let cell = &mut cells[row * n_items + (rec.item_id - 1) as usize];
            if *cell != ResponseCategory::Missing {
                return Err(Error::DuplicateCell {
                    respondent: rec.respondent_id,
                    item_id: rec.item_id,
                });
            }
            *cell = rec.category;
        }

        Ok(ResponseMatrix {
            bank,
            respondents,
            cells,
        })
    }

    pub fn bank(&self) -> &Arc<ItemBank> {
        &self.bank
    }

    pub fn respondents(&self) -> &[Respondent] {
        &self.respondents
    }

    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_items(&self) -> usize {
        self.bank.len()
    }

    /// Cell for (row index, 1-based item id).
    pub fn cell(&self, row: usize, item_id: u32) -> ResponseCategory {
        self.cells[row * self.n_items() + (item_id - 1) as usize]
    }

    /// One respondent's row in item-id order.
    pub fn row(&self, row: usize) -> &[ResponseCategory] {
        let n = self.n_items();
        &self.cells[row * n..(row + 1) * n]
    }

    /// Stage-1 projection: PNA → 1, answered → 0, MISSING preserved.
    pub fn binarize_pna(&self) -> BinaryMatrix {
        let cells = self
            .cells
            .iter()
            .map(|c| match c {
                ResponseCategory::Missing => None,
                ResponseCategory::Pna => Some(true),
                _ => Some(false),
            })
            .collect();
        BinaryMatrix {
            respondents: self.respondents.clone(),
            item_ids: self.bank.items().iter().map(|i| i.id).collect(),
            cells,
        }
    }

    /// Stage-2 projection: answered cells carry recoded ordinal codes; PNA
    /// and MISSING become `None`.
    pub fn filter_answered(&self) -> OrdinalMatrix {
        let n = self.n_items();
        let mut cells = Vec::with_capacity(self.cells.len());
        for (i, &cat) in self.cells.iter().enumerate() {
            let item = self.bank.items().get(i % n).expect("cell within bank");
            let code = match cat {
                ResponseCategory::Missing | ResponseCategory::Pna => None,
                answered => recode_category(item, answered)
                    .expect("answered cell recodes")
                    .ordinal_code(),
            };
            cells.push(code);
        }
        OrdinalMatrix {
            respondents: self.respondents.clone(),
            item_ids: self.bank.items().iter().map(|i| i.id).collect(),
            cells,
        }
    }

    /// PNA rate per key: `#PNA / #non-MISSING`, keys sorted. Errors if a key
    /// has no non-MISSING cell.
    pub fn pna_rates(&self, by: GroupBy) -> Result<Vec<(String, f64)>> {
        let mut acc: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for (row, resp) in self.respondents.iter().enumerate() {
            let key = match by {
                GroupBy::Respondent => resp.id.as_str(),
                GroupBy::Group => resp.group.as_str(),
            };
            let entry = acc.entry(key).or_default();
            for &cat in self.row(row) {
                match cat {
                    ResponseCategory::Missing => {}
                    ResponseCategory::Pna => {
                        entry.0 += 1;
                        entry.1 += 1;
                    }
                    _ => entry.1 += 1,
                }
            }
        }
        let mut out = Vec::with_capacity(acc.len());
        for (key, (pna, total)) in acc {
            if total == 0 {
                return Err(Error::EmptyGroup(key.to_string()));
            }
            out.push((key.to_string(), pna as f64 / total as f64));
        }
        Ok(out)
    }

    /// Serialize back to the response CSV format (MISSING cells omitted).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["respondent_id", "group", "item_id", "category"])
            .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
        for (row, resp) in self.respondents.iter().enumerate() {
            for item in self.bank.items() {
                let cat = self.cell(row, item.id);
                if cat == ResponseCategory::Missing {
                    continue;
                }
                wtr.write_record([
                    resp.id.as_str(),
                    resp.group.as_str(),
                    &item.id.to_string(),
                    cat.label(),
                ])
                .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

impl BinaryMatrix {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<bool> {
        self.cells[row * self.n_items() + col]
    }

    pub fn row(&self, row: usize) -> &[Option<bool>] {
        let n = self.n_items();
        &self.cells[row * n..(row + 1) * n]
    }

    /// Build directly from parts (used by tests and the simulator).
    pub fn from_parts(
        respondents: Vec<Respondent>,
        item_ids: Vec<u32>,
        cells: Vec<Option<bool>>,
    ) -> Result<Self> {
        if cells.len() != respondents.len() * item_ids.len() {
            return Err(Error::Validation("binary matrix shape mismatch".into()));
        }
        Ok(BinaryMatrix {
            respondents,
            item_ids,
            cells,
        })
    }
}

impl OrdinalMatrix {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<u8> {
        self.cells[row * self.n_items() + col]
    }

    pub fn row(&self, row: usize) -> &[Option<u8>] {
        let n = self.n_items();
        &self.cells[row * n..(row + 1) * n]
    }

    pub fn from_parts(
        respondents: Vec<Respondent>,
        item_ids: Vec<u32>,
        cells: Vec<Option<u8>>,
    ) -> Result<Self> {
        if cells.len() != respondents.len() * item_ids.len() {
            return Err(Error::Validation("ordinal matrix shape mismatch".into()));
        }
        if cells.iter().flatten().any(|&c| c > 3) {
            return Err(Error::Validation("ordinal code outside 0..=3".into()));
        }
        Ok(OrdinalMatrix {
            respondents,
            item_ids,
            cells,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank() -> Arc<ItemBank> {
        Arc::new(ItemBank::builtin())
    }

    fn rec(resp: &str, group: &str, item: u32, cat: ResponseCategory) -> ResponseRecord {
        ResponseRecord {
            respondent_id: resp.to_string(),
            group: group.to_string(),
            item_id: item,
            category: cat,
            raw_text: None,
        }
    }

    #[test]
    fn full_six_by_105_matrix_has_no_missing() {
        let bank = bank();
        let mut records = Vec::new();
        for m in 0..6 {
            for item in 1..=105 {
                records.push(rec(
                    &format!("model{m}"),
                    "family",
                    item,
                    ResponseCategory::Agree,
                ));
            }
        }
        let matrix = ResponseMatrix::from_records(records, bank).unwrap();
        assert_eq!(matrix.n_respondents(), 6);
        assert_eq!(matrix.n_items(), 105);
        for row in 0..6 {
            assert!(matrix
                .row(row)
                .iter()
                .all(|&c| c != ResponseCategory::Missing));
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            ResponseMatrix::from_records(vec![], bank()),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn duplicate_cell_rejected() {
        let records = vec![
            rec("m1", "g", 5, ResponseCategory::Agree),
            rec("m1", "g", 5, ResponseCategory::Disagree),
        ];
        let err = ResponseMatrix::from_records(records, bank()).unwrap_err();
        assert!(
            matches!(err, Error::DuplicateCell { item_id: 5, .. }),
            "{err}"
        );
    }

    #[test]
    fn unknown_item_rejected() {
        let records = vec![rec("m1", "g", 400, ResponseCategory::Agree)];
        assert!(matches!(
            ResponseMatrix::from_records(records, bank()),
            Err(Error::UnknownItem(400))
        ));
    }

    #[test]
    fn missing_category_rejected_on_ingest() {
        let records = vec![rec("m1", "g", 1, ResponseCategory::Missing)];
        assert!(ResponseMatrix::from_records(records, bank()).is_err());
    }

    #[test]
    fn conflicting_group_rejected() {
        let records = vec![
            rec("m1", "g1", 1, ResponseCategory::Agree),
            rec("m1", "g2", 2, ResponseCategory::Agree),
        ];
        assert!(ResponseMatrix::from_records(records, bank()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            rec("m1", "g", 1, ResponseCategory::StronglyAgree),
            rec("m1", "g", 2, ResponseCategory::Pna),
            rec("m2", "h", 1, ResponseCategory::Disagree),
        ];
        let matrix = ResponseMatrix::from_records(records.clone(), bank()).unwrap();
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf).unwrap();
        let parsed = parse_response_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn jsonl_parses_same_fields() {
        let line = r#"{"respondent_id":"m1","group":"g","item_id":3,"category":"SD"}"#;
        let records = parse_response_jsonl(line.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].category, ResponseCategory::StronglyDisagree);
        assert_eq!(records[0].raw_text, None);
    }

    #[test]
    fn binarize_definitions() {
        let records = vec![
            rec("m1", "g", 1, ResponseCategory::StronglyAgree),
            rec("m1", "g", 2, ResponseCategory::Disagree),
            rec("m1", "g", 3, ResponseCategory::Pna),
        ];
        let matrix = ResponseMatrix::from_records(records, bank()).unwrap();
        let bin = matrix.binarize_pna();
        assert_eq!(bin.cell(0, 0), Some(false));
        assert_eq!(bin.cell(0, 1), Some(false));
        assert_eq!(bin.cell(0, 2), Some(true));
        assert_eq!(bin.cell(0, 3), None);
    }

    #[test]
    fn filter_answered_applies_recoding() {
        // item 8 is reverse-coded in the bundled bank; item 1 is not
        let records = vec![
            rec("m1", "g", 8, ResponseCategory::StronglyAgree),
            rec("m1", "g", 1, ResponseCategory::StronglyAgree),
            rec("m1", "g", 2, ResponseCategory::Pna),
        ];
        let matrix = ResponseMatrix::from_records(records, bank()).unwrap();
        let ord = matrix.filter_answered();
        assert_eq!(ord.cell(0, 7), Some(0));
        assert_eq!(ord.cell(0, 0), Some(3));
        assert_eq!(ord.cell(0, 1), None);
        assert_eq!(ord.cell(0, 4), None);
    }

    #[test]
    fn all_pna_matrix_is_all_missing_ordinal() {
        let records: Vec<_> = (1..=105)
            .map(|i| rec("m1", "g", i, ResponseCategory::Pna))
            .collect();
        let matrix = ResponseMatrix::from_records(records, bank()).unwrap();
        let ord = matrix.filter_answered();
        assert!(ord.row(0).iter().all(|c| c.is_none()));
        let bin = matrix.binarize_pna();
        assert!(bin.row(0).iter().all(|&c| c == Some(true)));
        assert!((matrix.pna_rates(GroupBy::Respondent).unwrap()[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pna_rate_arithmetic() {
        let mut records = Vec::new();
        for i in 1..=105u32 {
            let cat = if i <= 21 {
                ResponseCategory::Pna
            } else {
                ResponseCategory::Agree
            };
            records.push(rec("m1", "g", i, cat));
        }
        let matrix = ResponseMatrix::from_records(records, bank()).unwrap();
        let rates = matrix.pna_rates(GroupBy::Respondent).unwrap();
        assert!((rates[0].1 - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pna_rates_invariant_under_row_permutation() {
        let a = vec![
            rec("m1", "g", 1, ResponseCategory::Pna),
            rec("m2", "g", 1, ResponseCategory::Agree),
            rec("m2", "g", 2, ResponseCategory::Pna),
        ];
        let mut b = a.clone();
        b.reverse();
        let ra = ResponseMatrix::from_records(a, bank())
            .unwrap()
            .pna_rates(GroupBy::Group)
            .unwrap();
        let rb = ResponseMatrix::from_records(b, bank())
            .unwrap()
            .pna_rates(GroupBy::Group)
            .unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn published_rate_fixture_preserves_ordering() {
        let csv = include_str!("../tests/data/published_pna_rates.csv");
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let mut rows: Vec<(String, f64)> = rdr
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[0].to_string(), r[1].parse().unwrap())
            })
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        let order: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(
            order,
            [
                "ChatGPT",
                "LLaMa-base",
                "Right-LLaMa",
                "Left-LLaMa",
                "RightGPT",
                "LeftGPT"
            ]
        );
        assert!(rows.windows(2).all(|w| w[0].1 > w[1].1));
    }

    proptest! {
        #[test]
        fn binary_and_ordinal_views_partition_cells(
            cats in proptest::collection::vec(0u8..6, 105)
        ) {
            let bank = bank();
            let mut records = Vec::new();
            for (i, &c) in cats.iter().enumerate() {
                let cat = match c {
                    0 => ResponseCategory::StronglyAgree,
                    1 => ResponseCategory::Agree,
                    2 => ResponseCategory::Disagree,
                    3 => ResponseCategory::StronglyDisagree,
                    4 => ResponseCategory::Pna,
                    _ => continue, // leave the cell MISSING
                };
                records.push(rec("m1", "g", i as u32 + 1, cat));
            }
            prop_assume!(!records.is_empty());
            let matrix = ResponseMatrix::from_records(records, bank).unwrap();
            let bin = matrix.binarize_pna();
            let ord = matrix.filter_answered();
            for col in 0..105 {
                let src = matrix.cell(0, col as u32 + 1);
                match src {
                    ResponseCategory::Missing => {
                        prop_assert_eq!(bin.cell(0, col), None);
                        prop_assert_eq!(ord.cell(0, col), None);
                    }
                    ResponseCategory::Pna => {
                        prop_assert_eq!(bin.cell(0, col), Some(true));
                        prop_assert_eq!(ord.cell(0, col), None);
                    }
                    _ => {
                        prop_assert_eq!(bin.cell(0, col), Some(false));
                        prop_assert!(ord.cell(0, col).is_some());
                    }
                }
            }
        }
    }
}

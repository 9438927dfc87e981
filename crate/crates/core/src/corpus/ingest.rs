use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Demographics, DemographicsSource, Gender, RatingRecord, UserHistory};
use crate::util::normalize_text;

/// Maps rating-dump headers onto [`RatingRecord`] fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub rating: String,
    pub timestamp: Option<String>,
    pub age: Option<String>,
    pub gender: Option<String>,
    /// Field delimiter; `None` picks tab for `.tsv`/`.dat` files and comma otherwise.
    pub delimiter: Option<char>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            user_id: "user_id".into(),
            item_id: "item_id".into(),
            item_title: "item_title".into(),
            rating: "rating".into(),
            timestamp: Some("timestamp".into()),
            age: Some("age".into()),
            gender: Some("gender".into()),
            delimiter: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<RatingRecord>,
    pub dropped: usize,
}

/// Optional columns named in the mapping but absent from the header are ignored;
/// required ones are fatal.
pub fn load_ratings(path: &Path, mapping: &ColumnMapping) -> Result<LoadReport, CorpusError> {
    let delimiter = mapping.delimiter.unwrap_or_else(|| {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("dat") => '\t',
            _ => ',',
        }
    });
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| find(name).ok_or_else(|| CorpusError::MissingColumn(name.to_string()));

    let user_col = require(&mapping.user_id)?;
    let item_col = require(&mapping.item_id)?;
    let title_col = require(&mapping.item_title)?;
    let rating_col = require(&mapping.rating)?;
    let ts_col = mapping.timestamp.as_deref().and_then(find);
    let age_col = mapping.age.as_deref().and_then(find);
    let gender_col = mapping.gender.as_deref().and_then(find);

    let mut report = LoadReport::default();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let title = sanitize_title(field(title_col));
        let rating = field(rating_col).parse::<f64>().ok().filter(|r| r.is_finite());
        let (Some(rating), false) = (rating, title.is_empty()) else {
            report.dropped += 1;
            continue;
        };
        let timestamp = ts_col.and_then(|c| field(c).parse::<i64>().ok());
        let age = age_col.and_then(|c| field(c).parse::<u32>().ok());
        let gender = gender_col.and_then(|c| Gender::parse_loose(field(c)));
        report.records.push(RatingRecord {
            user_id: field(user_col).to_string(),
            item_id: field(item_col).to_string(),
            item_title: title,
            rating,
            timestamp,
            age,
            gender,
        });
    }
    Ok(report)
}

/// Titles are rendered inside double quotes, so embedded double quotes become single quotes.
fn sanitize_title(raw: &str) -> String {
    normalize_text(&raw.replace('"', "'"))
}

/// Groups records per user (canonical user-id order) and sorts each history by
/// descending timestamp. Untimestamped records follow in input order.
pub fn build_histories(records: &[RatingRecord]) -> Vec<UserHistory> {
    let mut groups: BTreeMap<&str, Vec<RatingRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.user_id.as_str()).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(user_id, mut records)| {
            // stable sort keeps input order among equal keys
            records.sort_by(|a, b| match (a.timestamp, b.timestamp) {
                (Some(x), Some(y)) => y.cmp(&x),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            });
            let demographics = records.iter().find_map(|r| match (r.age, r.gender) {
                (Some(age), Some(gender)) => Some(Demographics {
                    age,
                    gender,
                    source: DemographicsSource::Recorded,
                }),
                _ => None,
            });
            UserHistory { user_id: user_id.to_string(), records, demographics }
        })
        .collect()
}

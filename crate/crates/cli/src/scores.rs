//! The score CSV: one line per scored sample with columns
//! `sample_id,label,pai_species,score`. Labels are `bona_fide` or
//! `attack`; the species column is empty exactly for bona fide rows.
//! Synthetic samples are attack rows under the species name "synthetic".

use padkit::dataio::{Class, SampleRecord};
use padkit::metrics::ScoreSet;
use padkit::{Error, Result};

pub const SCORE_HEADER: &str = "sample_id,label,pai_species,score";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub bona_fide: bool,
    /// Attack species; None exactly when the row is bona fide.
    pub species: Option<String>,
    pub score: f64,
}

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.contains(',') || value.contains('\n') || value.contains('\r') {
        return Err(Error::Usage(format!(
            "{what} \"{value}\" contains a separator character"
        )));
    }
    Ok(())
}

/// Pairs manifest records with their scores, in record order.
pub fn rows_from_records(records: &[SampleRecord], scores: &[f64]) -> Result<Vec<ScoreRow>> {
    if records.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} records for {} scores",
            records.len(),
            scores.len()
        )));
    }
    let mut rows = Vec::with_capacity(records.len());
    for (record, &score) in records.iter().zip(scores) {
        let (bona_fide, species) = match record.class {
            Class::Live => (true, None),
            Class::Synthetic => (false, Some("synthetic".to_string())),
            Class::Attack => {
                let sp = record.pai_species.clone().ok_or_else(|| {
                    Error::Usage(format!("attack record {} has no pai_species", record.id))
                })?;
                (false, Some(sp))
            }
        };
        rows.push(ScoreRow { sample_id: record.id.clone(), bona_fide, species, score });
    }
    Ok(rows)
}

pub fn render(rows: &[ScoreRow]) -> Result<String> {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for row in rows {
        check_field("sample id", &row.sample_id)?;
        let (label, species) = match (&row.bona_fide, &row.species) {
            (true, None) => ("bona_fide", ""),
            (false, Some(sp)) => {
                check_field("species", sp)?;
                ("attack", sp.as_str())
            }
            (true, Some(_)) => {
                return Err(Error::Usage(format!(
                    "bona fide row {} carries a species",
                    row.sample_id
                )))
            }
            (false, None) => {
                return Err(Error::Usage(format!(
                    "attack row {} has no species",
                    row.sample_id
                )))
            }
        };
        out.push_str(&format!("{},{},{},{}\n", row.sample_id, label, species, row.score));
    }
    Ok(out)
}

pub fn parse(text: &str) -> Result<Vec<ScoreRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == SCORE_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Usage(format!(
                "score CSV header is \"{header}\", expected \"{SCORE_HEADER}\""
            )))
        }
        None => return Err(Error::Usage("score CSV is empty".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Usage(format!(
                "score CSV line {lineno}: expected 4 fields, got {}",
                fields.len()
            )));
        }
        let score: f64 = fields[3].parse().map_err(|_| {
            Error::Usage(format!("score CSV line {lineno}: bad score \"{}\"", fields[3]))
        })?;
        let row = match fields[1] {
            "bona_fide" => {
                if !fields[2].is_empty() {
                    return Err(Error::Usage(format!(
                        "score CSV line {lineno}: bona fide row carries species \"{}\"",
                        fields[2]
                    )));
                }
                ScoreRow {
                    sample_id: fields[0].to_string(),
                    bona_fide: true,
                    species: None,
                    score,
                }
            }
            "attack" => {
                if fields[2].is_empty() {
                    return Err(Error::Usage(format!(
                        "score CSV line {lineno}: attack row has no species"
                    )));
                }
                ScoreRow {
                    sample_id: fields[0].to_string(),
                    bona_fide: false,
                    species: Some(fields[2].to_string()),
                    score,
                }
            }
            other => {
                return Err(Error::Usage(format!(
                    "score CSV line {lineno}: unknown label \"{other}\""
                )))
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn to_score_set(rows: &[ScoreRow]) -> Result<ScoreSet> {
    let mut set = ScoreSet::new();
    for row in rows {
        match (&row.bona_fide, &row.species) {
            (true, _) => set.push_bona(row.score)?,
            (false, Some(sp)) => set.push_attack(sp, row.score)?,
            (false, None) => {
                return Err(Error::Usage(format!(
                    "attack row {} has no species",
                    row.sample_id
                )))
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<ScoreRow> {
        vec![
            ScoreRow { sample_id: "live_s00_000".into(), bona_fide: true, species: None, score: 0.93 },
            ScoreRow {
                sample_id: "synth_0001".into(),
                bona_fide: false,
                species: Some("synthetic".into()),
                score: 0.40,
            },
            ScoreRow {
                sample_id: "attack_playdoh_002".into(),
                bona_fide: false,
                species: Some("playdoh".into()),
                score: 0.05,
            },
        ]
    }

    #[test]
    fn render_and_parse_round_trip() {
        let rows = sample_rows();
        let text = render(&rows).unwrap();
        assert!(text.starts_with("sample_id,label,pai_species,score\n"));
        assert!(text.contains("live_s00_000,bona_fide,,0.93\n"));
        assert!(text.contains("attack_playdoh_002,attack,playdoh,0.05\n"));
        let back = parse(&text).unwrap();
        assert_eq!(back, rows);
        // A second render of the parsed rows is byte-identical.
        assert_eq!(render(&back).unwrap(), text);
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(parse("").is_err());
        assert!(parse("id,label,species,score\n").is_err());
        let base = format!("{SCORE_HEADER}\n");
        assert!(parse(&format!("{base}a,bona_fide,0.5")).is_err());
        assert!(parse(&format!("{base}a,bona_fide,playdoh,0.5\n")).is_err());
        assert!(parse(&format!("{base}a,attack,,0.5\n")).is_err());
        assert!(parse(&format!("{base}a,maybe,,0.5\n")).is_err());
        assert!(parse(&format!("{base}a,bona_fide,,high\n")).is_err());
        // Line numbers count from the top of the file, header included.
        let err = parse(&format!("{base}a,bona_fide,,0.5\nb,attack,,0.2\n")).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn score_set_buckets_by_species() {
        let rows = sample_rows();
        let set = to_score_set(&rows).unwrap();
        assert_eq!(set.bona.len(), 1);
        assert_eq!(set.attack_count(), 2);
        assert_eq!(set.attacks.len(), 2);
    }

    #[test]
    fn records_map_to_rows_with_synthetic_species() {
        use padkit::dataio::Split;
        let records = vec![
            SampleRecord {
                id: "live_s00_000".into(),
                class: Class::Live,
                pai_species: None,
                subject: Some("s00".into()),
                split: Split::Test,
                path: "tensors/live_s00_000.t64".into(),
            },
            SampleRecord {
                id: "synth_0000".into(),
                class: Class::Synthetic,
                pai_species: None,
                subject: None,
                split: Split::Test,
                path: "tensors/synth_0000.t64".into(),
            },
        ];
        let rows = rows_from_records(&records, &[0.8, 0.3]).unwrap();
        assert!(rows[0].bona_fide);
        assert_eq!(rows[1].species.as_deref(), Some("synthetic"));
        assert!(rows_from_records(&records, &[0.8]).is_err());
    }
}

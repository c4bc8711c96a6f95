use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use super::tokenizer::SEP_TOKEN;
use super::{DatasetError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TweetRecord {
    pub ticker: String,
    pub date: NaiveDate,
    pub text: String,
}

impl TweetRecord {
    pub fn new(ticker: impl Into<String>, date: NaiveDate, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DatasetError::Contract("tweet text is empty".into()));
        }
        Ok(Self {
            ticker: ticker.into(),
            date,
            text,
        })
    }
}

/// Joins one ticker-day's tweets with the separator token, keeping input order.
pub fn concat_day_tweets(tweets: &[TweetRecord]) -> Result<String> {
    let Some(first) = tweets.first() else {
        return Ok(String::new());
    };
    if let Some(odd) = tweets.iter().find(|t| t.ticker != first.ticker || t.date != first.date) {
        return Err(DatasetError::Contract(format!(
            "cannot concatenate {} {} with {} {}",
            first.ticker, first.date, odd.ticker, odd.date
        )));
    }
    let texts: Vec<&str> = tweets.iter().map(|t| t.text.as_str()).collect();
    Ok(texts.join(&format!(" {SEP_TOKEN} ")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TweetLine {
    ticker: String,
    date: String,
    text: String,
}

/// Parses JSON-lines tweets (`ticker`, `date`, `text`); blank lines are skipped.
pub fn read_tweets_jsonl<R: Read>(reader: R) -> Result<Vec<TweetRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse { line: line_no, message };
        let row: TweetLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date {:?}: {e}", row.date)))?;
        let rec = TweetRecord::new(row.ticker, date, row.text).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_tweets_jsonl(path: &Path) -> Result<Vec<TweetRecord>> {
    read_tweets_jsonl(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(text: &str) -> TweetRecord {
        TweetRecord::new("AAA", NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(), text).unwrap()
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat_day_tweets(&[rec("buy now")]).unwrap(), "buy now");
        assert_eq!(concat_day_tweets(&[rec("a"), rec("b")]).unwrap(), "a [SEP] b");
        assert_eq!(concat_day_tweets(&[]).unwrap(), "");
    }

    #[test]
    fn concat_rejects_mixed_days() {
        let mut other = rec("x");
        other.date = NaiveDate::from_ymd_opt(2023, 1, 3).unwrap();
        assert!(concat_day_tweets(&[rec("a"), other]).is_err());
    }

    #[test]
    fn jsonl_parsing() {
        let src = "{\"ticker\":\"AAA\",\"date\":\"2023-01-02\",\"text\":\"hi\"}\n\n{\"ticker\":\"AAA\",\"date\":\"2023-01-02\",\"text\":\"  \"}\n";
        match read_tweets_jsonl(src.as_bytes()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ok = "{\"ticker\":\"AAA\",\"date\":\"2023-01-02\",\"text\":\"hi\"}\n";
        assert_eq!(read_tweets_jsonl(ok.as_bytes()).unwrap(), vec![rec("hi")]);
        assert!(TweetRecord::new("A", NaiveDate::MIN, " \t").is_err());
    }
}

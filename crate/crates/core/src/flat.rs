//! Flat `dotted.key = value` text, the format shared by config files,
//! dataset manifests and checkpoint headers. Parsing goes through `toml`,
//! so dotted keys become nested tables that serde can deserialize.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Flatten nested tables into `a.b.c` keys.
pub fn flatten(table: &Table) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(t) if !t.is_empty() => walk(&key, t, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", table, &mut out);
    out
}

/// Set `a.b.c` inside nested tables, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("key `{key}` collides with a scalar"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("parse error: {e}")))
}

/// Render one flat line per leaf, sorted by key.
pub fn format_table(table: &Table) -> String {
    let mut out = String::new();
    for (k, v) in flatten(table) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

pub fn to_text<T: Serialize>(value: &T) -> Result<String> {
    let table = Table::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format_table(&table))
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    from_table(parse_table(text)?)
}

/// Parse the right-hand side of `--set key=value`; bare words become strings.
pub fn parse_value(raw: &str) -> Value {
    raw.trim()
        .parse::<Value>()
        .unwrap_or_else(|_| Value::String(raw.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        tau_g: f64,
        names: Vec<String>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        seed: u64,
        sara: Inner,
    }

    #[test]
    fn dotted_round_trip() {
        let v = Outer {
            seed: 7,
            sara: Inner {
                tau_g: 0.07,
                names: vec!["a".into(), "b".into()],
            },
        };
        let text = to_text(&v).unwrap();
        assert_eq!(text, "sara.names = [\"a\", \"b\"]\nsara.tau_g = 0.07\nseed = 7\n");
        assert_eq!(from_text::<Outer>(&text).unwrap(), v);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = from_text::<Outer>("seed = 1\nsara.tau_g = 1.0\nsara.names = []\nsara.typo = 3\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn set_overrides_nested() {
        let mut t = parse_table("sara.tau_g = 0.07\n").unwrap();
        set_dotted(&mut t, "sara.tau_g", parse_value("0.5")).unwrap();
        set_dotted(&mut t, "mode", parse_value("fast")).unwrap();
        let flat = flatten(&t);
        assert_eq!(flat["sara.tau_g"], Value::Float(0.5));
        assert_eq!(flat["mode"], Value::String("fast".into()));
    }

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 123456.789] {
            let mut t = Table::new();
            t.insert("x".into(), Value::Float(x));
            let back = parse_table(&format_table(&t)).unwrap();
            assert_eq!(back["x"].as_float(), Some(x));
        }
    }
}

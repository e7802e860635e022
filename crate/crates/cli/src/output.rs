use std::io::{self, Write};

use qef_core::{Error, Result};
use serde::Serialize;
use serde_json::ser::Formatter;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{Command, RunConfig};

/// Compact JSON with every float written as `{:.16e}` (17 significant
/// digits). Non-finite values serialize as `null`.
pub struct FixedFloat;

impl Formatter for FixedFloat {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(v))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloat);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// CSV field for a float, in the same format as the JSON output.
pub fn csv_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "nan".into()
    }
}

pub fn write_csv<W: Write>(mut out: W, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

/// SHA-256 over the model file bytes and the echoed configuration.
pub fn inputs_digest(model_bytes: &[u8], cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(model_bytes);
    h.update(b"\n");
    h.update(to_json(&cfg.echo()).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct Document<'a, T: Serialize> {
    pub command: &'static str,
    pub qef_version: &'static str,
    pub inputs_digest: &'a str,
    pub config: RunConfig,
    #[serde(flatten)]
    pub result: T,
    pub diagnostics: Value,
}

pub fn error_json(err: &Error) -> String {
    #[derive(Serialize)]
    struct Body<'a> {
        kind: &'a str,
        field: Option<&'a str>,
        message: String,
        exit_code: i32,
    }
    #[derive(Serialize)]
    struct Wrapper<'a> {
        error: Body<'a>,
    }
    to_json(&Wrapper {
        error: Body {
            kind: err.kind(),
            field: err.field(),
            message: err.to_string(),
            exit_code: exit_code(err),
        },
    })
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Number,
    NumberOrNull,
    Integer,
    Str,
    Bool,
    Object,
    Rows(&'static [(&'static str, Kind)]),
}

fn check(v: Option<&Value>, kind: Kind, path: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::invalid(path, format!("expected {what}")));
    let Some(v) = v else {
        return Err(Error::invalid(path, "missing"));
    };
    match kind {
        Kind::Number if !v.is_number() => bad("a number"),
        Kind::NumberOrNull if !(v.is_number() || v.is_null()) => bad("a number or null"),
        Kind::Integer if !(v.is_u64() || v.is_i64()) => bad("an integer"),
        Kind::Str if !v.is_string() => bad("a string"),
        Kind::Bool if !v.is_boolean() => bad("a boolean"),
        Kind::Object if !v.is_object() => bad("an object"),
        Kind::Rows(fields) => {
            let Some(rows) = v.as_array() else {
                return bad("an array");
            };
            for (i, r) in rows.iter().enumerate() {
                for (name, k) in fields {
                    check(r.get(*name), *k, &format!("{path}[{i}].{name}"))?;
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

const CURVE_ROW: &[(&str, Kind)] = &[
    ("theta", Kind::Number),
    ("upsilon", Kind::NumberOrNull),
    ("method", Kind::Str),
    ("est_error", Kind::NumberOrNull),
];

const HORIZON_ROW: &[(&str, Kind)] = &[
    ("T", Kind::Number),
    ("rate_estimate", Kind::NumberOrNull),
    ("target", Kind::Number),
    ("rel_error", Kind::NumberOrNull),
];

fn fields_for(cmd: Command) -> &'static [(&'static str, Kind)] {
    match cmd {
        Command::Validate => &[
            ("valid", Kind::Bool),
            ("mode", Kind::Str),
            ("nu", Kind::Integer),
            ("n", Kind::Integer),
        ],
        Command::Rate => &[
            ("theta", Kind::Number),
            ("upsilon", Kind::NumberOrNull),
            ("margin", Kind::NumberOrNull),
            ("method", Kind::Str),
        ],
        Command::RateCurve => &[("method", Kind::Str), ("rows", Kind::Rows(CURVE_ROW))],
        Command::Horizon => &[("theta", Kind::Number), ("rows", Kind::Rows(HORIZON_ROW))],
        Command::Montecarlo => &[
            ("value", Kind::Number),
            ("stderr", Kind::Number),
            ("n_samples", Kind::Integer),
            ("seed", Kind::Integer),
            ("closed_form", Kind::Number),
        ],
        Command::Tail => &[
            ("alpha", Kind::Number),
            ("exponent", Kind::Number),
            ("argmax_theta", Kind::Number),
            ("theta_max", Kind::Number),
        ],
        Command::WorstCase => &[
            ("epsilon", Kind::Number),
            ("bound", Kind::Number),
            ("argmin_theta", Kind::NumberOrNull),
            ("limit_at_zero", Kind::Bool),
            ("theta_max", Kind::Number),
        ],
        Command::AppendixCheck => &[
            ("omega", Kind::Number),
            ("n_trunc", Kind::Integer),
            ("quad_order", Kind::Integer),
            ("max_block_error", Kind::Number),
            ("sigma", Kind::Number),
        ],
    }
}

/// Checks a result document against the schema of its command.
pub fn validate_document(text: &str) -> Result<Command> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::invalid("document", e.to_string()))?;
    if !v.is_object() {
        return Err(Error::invalid("document", "expected a JSON object"));
    }
    check(v.get("command"), Kind::Str, "command")?;
    let cmd: Command = v["command"].as_str().unwrap_or_default().parse()?;
    check(v.get("qef_version"), Kind::Str, "qef_version")?;
    check(v.get("inputs_digest"), Kind::Str, "inputs_digest")?;
    let d = v["inputs_digest"].as_str().unwrap_or_default();
    if d.len() != 64 || !d.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(Error::invalid("inputs_digest", "expected 64 lowercase hex digits"));
    }
    check(v.get("config"), Kind::Object, "config")?;
    RunConfig::deserialize_value(&v["config"])?;
    check(v.get("diagnostics"), Kind::Object, "diagnostics")?;
    for (name, kind) in fields_for(cmd) {
        check(v.get(*name), *kind, name)?;
    }
    Ok(cmd)
}

impl RunConfig {
    fn deserialize_value(v: &Value) -> Result<Self> {
        RunConfig::parse(&v.to_string()).map_err(|e| Error::InvalidParams {
            field: format!("config.{}", e.field().unwrap_or("config")),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_float_format() {
        assert_eq!(to_json(&0.1f64), "1.0000000000000001e-1");
        assert_eq!(to_json(&1.0f64), "1.0000000000000000e0");
        assert_eq!(to_json(&f64::NAN), "null");
        assert_eq!(to_json(&vec![2u32]), "[2]");
        let back: f64 = serde_json::from_str(&to_json(&std::f64::consts::PI)).unwrap();
        assert_eq!(back.to_bits(), std::f64::consts::PI.to_bits());
    }

    #[test]
    fn digest_ignores_output_locations() {
        let a = RunConfig {
            theta: Some(0.1),
            ..Default::default()
        };
        let b = RunConfig {
            output_path: Some("x.json".into()),
            ..a.clone()
        };
        assert_eq!(inputs_digest(b"m", &a), inputs_digest(b"m", &b));
        assert_ne!(inputs_digest(b"m", &a), inputs_digest(b"n", &a));
        assert_eq!(inputs_digest(b"m", &a).len(), 64);
    }

    #[test]
    fn validator_reports_fields() {
        let good = r#"{"command":"rate","qef_version":"0.1.0","inputs_digest":"0000000000000000000000000000000000000000000000000000000000000000",
            "config":{"theta":0.1},"theta":0.1,"upsilon":0.1,"margin":0.5,"method":"frequency","diagnostics":{}}"#;
        assert_eq!(validate_document(good).unwrap(), Command::Rate);
        let missing = good.replace("\"margin\":0.5,", "");
        assert_eq!(validate_document(&missing).unwrap_err().field(), Some("margin"));
        let digest = good.replace(&"0".repeat(64), &"0".repeat(63));
        assert_eq!(validate_document(&digest).unwrap_err().field(), Some("inputs_digest"));
        let cfg = good.replace("{\"theta\":0.1}", "{\"bogus\":1}");
        assert_eq!(validate_document(&cfg).unwrap_err().field(), Some("config.bogus"));
        assert_eq!(validate_document("[]").unwrap_err().field(), Some("document"));
        let rows = r#"{"command":"rate-curve","qef_version":"0.1.0","inputs_digest":"0000000000000000000000000000000000000000000000000000000000000000",
            "config":{},"method":"frequency","rows":[{"theta":0.1,"upsilon":0.1,"method":"frequency"}],"diagnostics":{}}"#;
        assert_eq!(validate_document(rows).unwrap_err().field(), Some("rows[0].est_error"));
    }

    #[test]
    fn error_document() {
        let e = Error::invalid("r_matrix", "must be symmetric");
        let v: Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"]["field"], "r_matrix");
        assert_eq!(v["error"]["exit_code"], 2);
        let n = Error::NotAdmissible {
            theta: 1.0,
            margin: -0.1,
        };
        assert_eq!(exit_code(&n), 3);
    }
}

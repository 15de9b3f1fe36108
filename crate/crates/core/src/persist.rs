//! Versioned, line-oriented text format for trained models.
//!
//! ```text
//! DRCF 1
//! d <d>
//! h <h>
//! k_max <real>
//! users <count>
//! items <count>
//! lambda <real>
//! global_mean <real>
//! U <count>
//! <one raw user id per line>
//! I <count>
//! <one raw item id per line>
//! T <name> <rows> <cols>
//! <rows lines of cols space-separated reals>
//! ...                          (one T section per tensor, storage order)
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::Vocab;
use crate::error::{Error, Result};
use crate::eval::TrainedModel;
use crate::model::{Group, Layout, ModelParams};

pub const FORMAT_TAG: &str = "DRCF";
pub const FORMAT_VERSION: u32 = 1;

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders `model` in the model-file format (LF line endings).
pub fn to_string(model: &TrainedModel) -> String {
    let p = &model.params;
    let l = p.layout();
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_TAG} {FORMAT_VERSION}");
    let _ = writeln!(out, "d {}", l.d);
    let _ = writeln!(out, "h {}", l.h);
    let _ = writeln!(out, "k_max {}", real(p.k_max()));
    let _ = writeln!(out, "users {}", l.users);
    let _ = writeln!(out, "items {}", l.items);
    let _ = writeln!(out, "lambda {}", real(model.lambda));
    let _ = writeln!(out, "global_mean {}", real(model.global_mean));
    for (tag, vocab) in [("U", &model.user_vocab), ("I", &model.item_vocab)] {
        let _ = writeln!(out, "{tag} {}", vocab.len());
        for id in vocab.ids() {
            out.push_str(id);
            out.push('\n');
        }
    }
    for group in Group::ALL {
        let (rows, cols) = l.shape(group);
        let _ = writeln!(out, "T {} {rows} {cols}", group.name());
        for row in p.group(group).chunks(cols) {
            let line: Vec<String> = row.iter().map(|&v| real(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn save(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l.strip_suffix('\r').unwrap_or(l)),
            None => Err(Error::Shape(format!("file truncated before {what}"))),
        }
    }

    fn format_err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            line: self.line,
            msg: msg.into(),
        }
    }

    /// `<key> <value>` line.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next(key)?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.format_err(format!("expected `{key} <value>`, found {l:?}"))),
        }
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.format_err(format!("bad {key} count {v:?}")))
    }

    fn real(&mut self, key: &str) -> Result<f64> {
        let v = self.field(key)?;
        parse_real(v, key, self)
    }
}

fn parse_real(text: &str, what: &str, lines: &Lines<'_>) -> Result<f64> {
    let v: f64 = text
        .parse()
        .map_err(|_| lines.format_err(format!("bad number {text:?} in {what}")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} (line {})", lines.line)));
    }
    Ok(v)
}

/// Parses the model-file format. Either LF or CRLF endings are accepted.
pub fn from_str(text: &str) -> Result<TrainedModel> {
    let mut lines = Lines {
        inner: text.lines(),
        line: 0,
    };
    let head = lines.next("header")?;
    match head.split_once(' ') {
        Some((FORMAT_TAG, v)) if v == FORMAT_VERSION.to_string() => {}
        Some((FORMAT_TAG, v)) => {
            return Err(Error::Version {
                found: v.to_string(),
                expected: FORMAT_VERSION,
            })
        }
        _ => return Err(lines.format_err(format!("not a {FORMAT_TAG} model file"))),
    }
    let d = lines.count("d")?;
    let h = lines.count("h")?;
    let k_max = lines.real("k_max")?;
    let users = lines.count("users")?;
    let items = lines.count("items")?;
    let lambda = lines.real("lambda")?;
    let global_mean = lines.real("global_mean")?;
    let layout = Layout::new(d, h, users, items).map_err(|e| Error::Shape(e.to_string()))?;

    let mut vocab = |tag: &str, expected: usize| -> Result<Vocab> {
        let n = lines.count(tag)?;
        if n != expected {
            return Err(Error::Shape(format!("{tag} section has {n} ids, header says {expected}")));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(lines.next("vocabulary id")?.to_string());
        }
        Vocab::from_ids(ids)
    };
    let user_vocab = vocab("U", users)?;
    let item_vocab = vocab("I", items)?;

    let mut values = Vec::with_capacity(layout.len());
    for group in Group::ALL {
        let (rows, cols) = layout.shape(group);
        let t = lines.next("tensor header")?;
        let parts: Vec<&str> = t.split(' ').collect();
        if parts.len() != 4 || parts[0] != "T" || parts[1] != group.name() {
            return Err(lines.format_err(format!("expected `T {} ...`, found {t:?}", group.name())));
        }
        if parts[2] != rows.to_string() || parts[3] != cols.to_string() {
            return Err(Error::Shape(format!(
                "{} is {}x{} in file, header implies {rows}x{cols}",
                group.name(),
                parts[2],
                parts[3]
            )));
        }
        for _ in 0..rows {
            let row = lines.next(group.name())?;
            let before = values.len();
            for tok in row.split(' ').filter(|s| !s.is_empty()) {
                values.push(parse_real(tok, group.name(), &lines)?);
            }
            if values.len() - before != cols {
                return Err(Error::Shape(format!(
                    "{} row at line {} has {} values, expected {cols}",
                    group.name(),
                    lines.line,
                    values.len() - before
                )));
            }
        }
    }
    for rest in lines.inner.by_ref() {
        if !rest.trim().is_empty() {
            return Err(Error::Format {
                line: lines.line + 1,
                msg: "trailing content after last tensor".into(),
            });
        }
    }

    let params = ModelParams::from_values(layout, k_max, values).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Shape(m),
        other => other,
    })?;
    Ok(TrainedModel {
        params,
        user_vocab,
        item_vocab,
        global_mean,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, predict_rating, Hyperparams};

    fn model() -> TrainedModel {
        let hp = Hyperparams {
            d: 3,
            h: 2,
            seed: 5,
            ..Hyperparams::default()
        };
        let mut params = init_params(2, 3, 5.0, &hp).unwrap();
        params.group_mut(Group::HiddenBias)[1] = -0.0;
        params.group_mut(Group::OutputBias)[0] = 1.0 / 3.0;
        TrainedModel {
            params,
            user_vocab: Vocab::from_ids(["196", "alice"]).unwrap(),
            item_vocab: Vocab::from_ids(["242", "302", "x y"]).unwrap(),
            global_mean: 3.529,
            lambda: 1e-4,
        }
    }

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.values().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let text = to_string(&m);
        assert!(text.starts_with("DRCF 1\n"));
        let back = from_str(&text).unwrap();
        assert_eq!(bits(&back.params), bits(&m.params));
        assert_eq!(back, m);
        assert_eq!(to_string(&back), text);
        for u in 0..2 {
            for i in 0..3 {
                assert_eq!(
                    predict_rating(&m.params, u, i).unwrap().to_bits(),
                    predict_rating(&back.params, u, i).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn crlf_accepted() {
        let m = model();
        let crlf = to_string(&m).replace('\n', "\r\n");
        assert_eq!(from_str(&crlf).unwrap(), m);
    }

    #[test]
    fn file_round_trip_and_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.drcf");
        save(&model(), &path).unwrap();
        assert_eq!(load(&path).unwrap(), model());
        let err = save(&model(), dir.path().join("missing/dir/m.drcf")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("missing"));
        assert!(matches!(load(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn version_mismatch() {
        let text = to_string(&model()).replacen("DRCF 1", "DRCF 2", 1);
        assert!(matches!(from_str(&text), Err(Error::Version { .. })));
        assert!(matches!(from_str("HELLO 1\n"), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn truncation_is_shape_error() {
        let text = to_string(&model());
        let lines: Vec<&str> = text.lines().collect();
        for keep in [12, lines.len() - 1] {
            let cut = lines[..keep].join("\n");
            assert!(matches!(from_str(&cut), Err(Error::Shape(_))), "keep={keep}");
        }
        // a short row
        let mut short: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        let last = short.len() - 3;
        short[last] = short[last].split(' ').next().unwrap().to_string();
        assert!(matches!(from_str(&short.join("\n")), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let text = to_string(&model());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines.len() - 1;
        lines[last] = "NaN".into();
        assert!(matches!(from_str(&lines.join("\n")), Err(Error::NonFinite(_))));
        let inf = text.replacen("k_max 5.0000000000000000e0", "k_max inf", 1);
        assert!(matches!(from_str(&inf), Err(Error::NonFinite(_))));
    }

    #[test]
    fn header_vocab_mismatch() {
        let text = to_string(&model()).replacen("users 2", "users 3", 1);
        assert!(matches!(from_str(&text), Err(Error::Shape(_))));
    }
}

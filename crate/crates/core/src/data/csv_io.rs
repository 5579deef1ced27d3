//! Dataset CSV layout:
//! `id, f_0..f_{d-1}, [y], [c_<name>..], [c_<name>_soft..], [bb_score], [t_0..]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Column blocks found in a header, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
struct Layout {
    n_features: usize,
    has_labels: bool,
    golden: Vec<String>,
    soft: Vec<String>,
    has_scores: bool,
    n_teacher: usize,
}

impl Layout {
    fn of(ds: &Dataset) -> Layout {
        Layout {
            n_features: ds.n_features(),
            has_labels: ds.labels().is_some(),
            golden: if ds.golden().is_some() { ds.concept_names().to_vec() } else { Vec::new() },
            soft: if ds.soft().is_some() { ds.concept_names().to_vec() } else { Vec::new() },
            has_scores: ds.bb_scores().is_some(),
            n_teacher: ds.teacher_features().map_or(0, Matrix::cols),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["id".to_string()];
        h.extend((0..self.n_features).map(|i| format!("f_{i}")));
        if self.has_labels {
            h.push("y".into());
        }
        h.extend(self.golden.iter().map(|n| format!("c_{n}")));
        h.extend(self.soft.iter().map(|n| format!("c_{n}_soft")));
        if self.has_scores {
            h.push("bb_score".into());
        }
        h.extend((0..self.n_teacher).map(|i| format!("t_{i}")));
        h
    }

    fn parse(header: &[&str]) -> std::result::Result<Layout, String> {
        let mut it = header.iter().peekable();
        if it.next() != Some(&"id") {
            return Err("first column must be `id`".into());
        }
        let mut l = Layout::default();
        while let Some(c) = it.peek() {
            if **c == format!("f_{}", l.n_features) {
                l.n_features += 1;
                it.next();
            } else {
                break;
            }
        }
        if l.n_features == 0 {
            return Err("expected feature columns f_0, f_1, ...".into());
        }
        if it.peek() == Some(&&"y") {
            l.has_labels = true;
            it.next();
        }
        while let Some(c) = it.peek() {
            match c.strip_prefix("c_") {
                Some(name) if !name.ends_with("_soft") => {
                    l.golden.push(name.to_string());
                    it.next();
                }
                _ => break,
            }
        }
        while let Some(c) = it.peek() {
            match c.strip_prefix("c_").and_then(|n| n.strip_suffix("_soft")) {
                Some(name) => {
                    l.soft.push(name.to_string());
                    it.next();
                }
                None => break,
            }
        }
        if !l.golden.is_empty() && !l.soft.is_empty() && l.golden != l.soft {
            return Err("golden and soft concept columns name different concepts".into());
        }
        if it.peek() == Some(&&"bb_score") {
            l.has_scores = true;
            it.next();
        }
        while let Some(c) = it.peek() {
            if **c == format!("t_{}", l.n_teacher) {
                l.n_teacher += 1;
                it.next();
            } else {
                break;
            }
        }
        if let Some(c) = it.next() {
            return Err(format!("unexpected or out-of-order column `{c}`"));
        }
        Ok(l)
    }

    fn width(&self) -> usize {
        1 + self.n_features
            + usize::from(self.has_labels)
            + self.golden.len()
            + self.soft.len()
            + usize::from(self.has_scores)
            + self.n_teacher
    }
}

fn fmt_f64(v: f64) -> String {
    // Debug is the shortest string that parses back to the same bits
    format!("{v:?}")
}

fn fmt_binary(v: f64) -> String {
    if v == 0.0 { "0".into() } else { "1".into() }
}

impl Dataset {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        self.write_csv(BufWriter::new(f))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let layout = Layout::of(self);
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record(layout.header())?;
        let mut row: Vec<String> = Vec::with_capacity(layout.width());
        for r in 0..self.len() {
            row.clear();
            row.push(self.ids()[r].clone());
            row.extend(self.features().row(r).iter().map(|&v| fmt_f64(v)));
            if let Some(y) = self.labels() {
                row.push(fmt_binary(y[r]));
            }
            if let Some(g) = self.golden() {
                row.extend(g.row(r).iter().map(|&v| fmt_binary(v)));
            }
            if let Some(s) = self.soft() {
                row.extend(s.row(r).iter().map(|&v| fmt_f64(v)));
            }
            if let Some(s) = self.bb_scores() {
                row.push(fmt_f64(s[r]));
            }
            if let Some(t) = self.teacher_features() {
                row.extend(t.row(r).iter().map(|&v| fmt_f64(v)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let f = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        Dataset::read_csv(BufReader::new(f), path)
    }

    /// Parses CSV text; `source` is used in error messages only.
    pub fn read_csv<R: Read>(input: R, source: &Path) -> Result<Dataset> {
        let perr = |line: usize, msg: String| Error::Parse { path: PathBuf::from(source), line, msg };
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(perr(1, "empty file".into())),
        };
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        let layout = Layout::parse(&cols).map_err(|m| perr(1, m))?;
        let width = layout.width();
        let k = layout.golden.len().max(layout.soft.len());

        let mut ids = Vec::new();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut golden = Vec::new();
        let mut soft = Vec::new();
        let mut scores = Vec::new();
        let mut teacher = Vec::new();
        for rec in records {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != width {
                return Err(perr(line, format!("expected {width} fields, found {}", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                let cell = rec[i].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(line, format!("column {} is not a finite number: {cell:?}", i + 1)))
            };
            ids.push(rec[0].trim().to_string());
            let mut c = 1;
            for _ in 0..layout.n_features {
                feats.push(num(c)?);
                c += 1;
            }
            if layout.has_labels {
                labels.push(num(c)?);
                c += 1;
            }
            for _ in 0..layout.golden.len() {
                golden.push(num(c)?);
                c += 1;
            }
            for _ in 0..layout.soft.len() {
                soft.push(num(c)?);
                c += 1;
            }
            if layout.has_scores {
                scores.push(num(c)?);
                c += 1;
            }
            for _ in 0..layout.n_teacher {
                teacher.push(num(c)?);
                c += 1;
            }
        }
        let n = ids.len();
        let ctx = |e: Error| Error::Data(format!("{}: {e}", source.display()));
        let mut ds = Dataset::new(ids, Matrix::new(n, layout.n_features, feats)?).map_err(ctx)?;
        if layout.has_labels {
            ds = ds.with_labels(labels).map_err(ctx)?;
        }
        if !layout.golden.is_empty() {
            ds = ds.with_golden(layout.golden.clone(), Matrix::new(n, k, golden)?).map_err(ctx)?;
        }
        if !layout.soft.is_empty() {
            ds = ds.with_soft(layout.soft.clone(), Matrix::new(n, k, soft)?).map_err(ctx)?;
        }
        if layout.has_scores {
            ds = ds.with_bb_scores(scores).map_err(ctx)?;
        }
        if layout.n_teacher > 0 {
            ds = ds.with_teacher_features(Matrix::new(n, layout.n_teacher, teacher)?).map_err(ctx)?;
        }
        Ok(ds)
    }
}

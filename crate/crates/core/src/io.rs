//! File formats: dataset JSONL, calibrator parameter JSON, and CSV exports.
//!
//! Every writer goes through a temporary file in the destination directory
//! that is renamed into place, so a failed write leaves nothing behind.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{KSweepRow, SurfaceGrid, WrongnessRow};
use crate::calibrator::{Calibrated, CalibratorParams, Dense, TrainingTrace};
use crate::error::{CalibError, Result};
use crate::metrics::MetricsReport;
use crate::records::{Dataset, SampleRecord};
use crate::tensor_math::{check_probs, PROB_SUM_TOL};

pub const PARAMS_VERSION: u64 = 1;

/// Transform rows off by more than this are rejected.
const RENORM_REJECT_TOL: f64 = 1e-3;
/// Transform rows off by more than this are renormalised with a warning.
const RENORM_WARN_TOL: f64 = 1e-6;

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CalibError::Io(e.error))?;
    Ok(())
}

#[derive(Serialize)]
struct DatasetLine<'a> {
    label: usize,
    logits: &'a [f64],
    transforms: &'a [Vec<f64>],
}

/// One JSON object per record.
pub fn dataset_to_jsonl(d: &Dataset) -> Result<String> {
    let mut out = String::new();
    for r in d.records() {
        let line = DatasetLine {
            label: r.label,
            logits: &r.logits,
            transforms: &r.transform_probs,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, dataset_to_jsonl(d)?.as_bytes())
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, reason: impl Into<String>) -> CalibError {
        CalibError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    fn reals(&self, v: &Value, field: &str) -> Result<Vec<f64>> {
        let arr = v
            .as_array()
            .ok_or_else(|| self.err(field, "expected an array of numbers"))?;
        arr.iter()
            .enumerate()
            .map(|(i, x)| {
                x.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| self.err(field, format!("entry {i} is not a finite number")))
            })
            .collect()
    }
}

fn parse_record(
    value: &Value,
    ctx: &LineCtx<'_>,
    shape: Option<(usize, usize)>,
) -> Result<SampleRecord> {
    let obj = value
        .as_object()
        .ok_or_else(|| ctx.err("<line>", "expected a JSON object"))?;
    let get = |f: &str| obj.get(f).ok_or_else(|| ctx.err(f, "missing"));

    let logits = ctx.reals(get("logits")?, "logits")?;
    if logits.len() < 2 {
        return Err(ctx.err(
            "logits",
            format!("need at least 2 classes, got {}", logits.len()),
        ));
    }
    let c = logits.len();
    let label = get("label")?
        .as_u64()
        .ok_or_else(|| ctx.err("label", "expected a non-negative integer"))?
        as usize;
    if label >= c {
        return Err(ctx.err("label", format!("{label} out of range for {c} classes")));
    }
    let rows = get("transforms")?
        .as_array()
        .ok_or_else(|| ctx.err("transforms", "expected an array of arrays"))?;
    if rows.is_empty() {
        return Err(ctx.err("transforms", "need at least one transform row"));
    }
    if let Some((dc, dm)) = shape {
        if c != dc {
            return Err(ctx.err("logits", format!("{c} classes, earlier lines have {dc}")));
        }
        if rows.len() != dm {
            return Err(ctx.err(
                "transforms",
                format!("{} rows, earlier lines have {dm}", rows.len()),
            ));
        }
    }
    let mut transforms = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let field = format!("transforms[{i}]");
        let mut v = ctx.reals(row, &field)?;
        if v.len() != c {
            return Err(ctx.err(&field, format!("{} entries, expected {c}", v.len())));
        }
        if v.iter().any(|x| *x < 0.0) {
            return Err(ctx.err(&field, "negative probability"));
        }
        let sum: f64 = v.iter().sum();
        let gap = (sum - 1.0).abs();
        if gap > RENORM_REJECT_TOL {
            return Err(ctx.err(&field, format!("sums to {sum}")));
        }
        if gap > PROB_SUM_TOL {
            if gap > RENORM_WARN_TOL {
                log::warn!(
                    "{}: line {}: {field} sums to {sum}; renormalised",
                    ctx.path.display(),
                    ctx.line
                );
            }
            v.iter_mut().for_each(|x| *x /= sum);
        }
        check_probs(&v, PROB_SUM_TOL).map_err(|e| ctx.err(&field, e.to_string()))?;
        transforms.push(v);
    }
    SampleRecord::new(ctx.line, logits, label, transforms)
        .map_err(|e| ctx.err("<record>", e.to_string()))
}

/// Streams a JSONL dataset; blank lines are skipped and record ids are
/// 1-based line numbers.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut shape = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: i + 1 };
        let value: Value =
            serde_json::from_str(&line).map_err(|e| ctx.err("<line>", e.to_string()))?;
        let r = parse_record(&value, &ctx, shape)?;
        shape = Some((r.num_classes(), r.num_transforms()));
        records.push(r);
    }
    if records.is_empty() {
        return Err(CalibError::Parse {
            path: path.to_path_buf(),
            line: 0,
            field: "<file>".into(),
            reason: "no records".into(),
        });
    }
    Dataset::new(records)
}

/// On-disk layout of a calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub version: u64,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "M")]
    pub num_transforms: usize,
    pub k: usize,
    pub tau_min: f64,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    /// Second hidden layer, present only for the two-hidden-layer variant.
    #[serde(rename = "Wh", default, skip_serializing_if = "Option::is_none")]
    pub wh: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bh: Option<Vec<f64>>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: f64,
}

impl From<&CalibratorParams> for ParamsFile {
    fn from(p: &CalibratorParams) -> Self {
        let second = p.hidden.get(1);
        Self {
            version: PARAMS_VERSION,
            num_classes: p.num_classes,
            num_transforms: p.num_transforms,
            k: p.k,
            tau_min: p.tau_min,
            w1: p.hidden[0].weights.clone(),
            b1: p.hidden[0].bias.clone(),
            wh: second.map(|l| l.weights.clone()),
            bh: second.map(|l| l.bias.clone()),
            w2: p.output.weights.clone(),
            b2: p.output.bias[0],
        }
    }
}

impl TryFrom<ParamsFile> for CalibratorParams {
    type Error = CalibError;

    fn try_from(f: ParamsFile) -> Result<Self> {
        if f.version != PARAMS_VERSION {
            return Err(CalibError::UnsupportedVersion(f.version));
        }
        let mut hidden = vec![Dense {
            weights: f.w1,
            bias: f.b1,
        }];
        match (f.wh, f.bh) {
            (Some(weights), Some(bias)) => hidden.push(Dense { weights, bias }),
            (None, None) => {}
            (Some(_), None) => {
                return Err(CalibError::ParamsShape {
                    field: "bh".into(),
                    reason: "missing while Wh is present".into(),
                })
            }
            (None, Some(_)) => {
                return Err(CalibError::ParamsShape {
                    field: "Wh".into(),
                    reason: "missing while bh is present".into(),
                })
            }
        }
        let p = CalibratorParams {
            num_classes: f.num_classes,
            num_transforms: f.num_transforms,
            k: f.k,
            tau_min: f.tau_min,
            hidden,
            output: Dense {
                weights: f.w2,
                bias: vec![f.b2],
            },
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn params_to_json(p: &CalibratorParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ParamsFile::from(p))?)
}

pub fn params_from_json(s: &str) -> Result<CalibratorParams> {
    // check the version before the strict schema so old files get a clear error
    let raw: Value = serde_json::from_str(s)?;
    match raw.get("version").and_then(Value::as_u64) {
        Some(PARAMS_VERSION) => {}
        Some(v) => return Err(CalibError::UnsupportedVersion(v)),
        None => {
            return Err(CalibError::ParamsShape {
                field: "version".into(),
                reason: "missing or not an integer".into(),
            })
        }
    }
    let file: ParamsFile = serde_json::from_value(raw)?;
    file.try_into()
}

pub fn save_params(p: &CalibratorParams, path: &Path) -> Result<()> {
    p.validate()?;
    let mut s = params_to_json(p)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn load_params(path: &Path) -> Result<CalibratorParams> {
    params_from_json(&std::fs::read_to_string(path)?)
}

/// Table values are percentages with two decimals unless `raw` is set.
fn metric(v: f64, raw: bool) -> String {
    if raw {
        v.to_string()
    } else {
        format!("{:.2}", v * 100.0)
    }
}

fn opt_metric(v: Option<f64>, raw: bool) -> String {
    v.map(|x| metric(x, raw)).unwrap_or_default()
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| CalibError::Io(e.into_error()))
}

pub fn metrics_csv(rows: &[MetricsReport], raw: bool) -> Result<Vec<u8>> {
    csv_bytes(
        &["method", "ece", "bs", "ks", "auroc", "accuracy", "n"],
        rows.iter().map(|r| {
            vec![
                r.method.clone(),
                metric(r.ece, raw),
                metric(r.brier, raw),
                metric(r.ks, raw),
                opt_metric(r.auroc, raw),
                metric(r.accuracy, raw),
                r.n.to_string(),
            ]
        }),
    )
}

/// Long format, one row per grid cell; values are raw.
pub fn surface_csv(grids: &[SurfaceGrid]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for g in grids {
        for (i, a) in g.a_values.iter().enumerate() {
            for (j, tau) in g.tau_values.iter().enumerate() {
                rows.push(vec![
                    g.loss_kind.to_string(),
                    a.to_string(),
                    tau.to_string(),
                    g.loss[i][j].to_string(),
                    g.c_gt[i][j].to_string(),
                ]);
            }
        }
    }
    csv_bytes(&["loss_kind", "a", "tau", "loss", "c_gt"], rows)
}

/// Epoch 0 is the loss before the first update.
pub fn trace_csv(t: &TrainingTrace) -> Result<Vec<u8>> {
    let rows = std::iter::once(t.initial_loss)
        .chain(t.epoch_losses.iter().copied())
        .enumerate()
        .map(|(e, l)| vec![e.to_string(), l.to_string()]);
    csv_bytes(&["epoch", "loss"], rows)
}

pub fn calibrated_csv(d: &Dataset, out: &[Calibrated]) -> Result<Vec<u8>> {
    csv_bytes(
        &["id", "label", "predicted", "tau", "confidence"],
        d.records().iter().zip(out).map(|(r, c)| {
            vec![
                r.id.to_string(),
                r.label.to_string(),
                c.predicted.to_string(),
                c.tau.to_string(),
                c.confidence.to_string(),
            ]
        }),
    )
}

pub fn wrongness_csv(rows: &[WrongnessRow], raw: bool) -> Result<Vec<u8>> {
    csv_bytes(
        &["band_low", "band_high", "method", "ece", "auroc", "n"],
        rows.iter().map(|r| {
            vec![
                r.band_low.to_string(),
                r.band_high.to_string(),
                r.method.clone(),
                metric(r.ece, raw),
                opt_metric(r.auroc, raw),
                r.n.to_string(),
            ]
        }),
    )
}

pub fn k_sweep_csv(rows: &[KSweepRow], raw: bool) -> Result<Vec<u8>> {
    csv_bytes(
        &["k", "method", "ks", "auroc"],
        rows.iter().map(|r| {
            vec![
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.method.clone(),
                metric(r.ks, raw),
                opt_metric(r.auroc, raw),
            ]
        }),
    )
}

pub fn export_csv(bytes: &[u8], path: &Path) -> Result<()> {
    atomic_write(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrator::Architecture;
    use crate::datagen::{generate, SynthConfig};
    use std::path::PathBuf;

    fn sample() -> Dataset {
        generate(&SynthConfig {
            n: 50,
            num_classes: 4,
            num_transforms: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        let p = dir.path().join("d.jsonl");
        save_dataset(&d, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        for (a, b) in d.records().iter().zip(back.records()) {
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.label, b.label);
            assert_eq!(a.transform_probs, b.transform_probs);
        }
        assert_eq!(back.records()[0].id, 1);
    }

    #[test]
    fn wrong_class_count_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            "{\"label\":0,\"logits\":[1,0],\"transforms\":[[0.5,0.5]]}\n\
             {\"label\":0,\"logits\":[1,0,2],\"transforms\":[[0.5,0.25,0.25]]}\n",
        );
        match load_dataset(&p) {
            Err(CalibError::Parse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "logits");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transform_sums_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "a.jsonl",
            "{\"label\":1,\"logits\":[1,0],\"transforms\":[[0.5,0.5004]]}\n",
        );
        let d = load_dataset(&ok).unwrap();
        let s: f64 = d.records()[0].transform_probs[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        let bad = write(
            dir.path(),
            "b.jsonl",
            "{\"label\":1,\"logits\":[1,0],\"transforms\":[[0.5,0.6]]}\n",
        );
        match load_dataset(&bad) {
            Err(CalibError::Parse { field, .. }) => assert_eq!(field, "transforms[0]"),
            other => panic!("unexpected {other:?}"),
        }

        let missing = write(dir.path(), "c.jsonl", "{\"label\":1,\"logits\":[1,0]}\n");
        assert!(matches!(
            load_dataset(&missing),
            Err(CalibError::Parse { .. })
        ));
    }

    #[test]
    fn params_round_trip_is_bit_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for arch in [Architecture::OneHidden, Architecture::TwoHidden] {
            let p = CalibratorParams::init(4, 2, 3, 0.05, arch, &mut rng);
            let back = params_from_json(&params_to_json(&p).unwrap()).unwrap();
            assert_eq!(p, back);
        }
    }

    #[test]
    fn params_errors() {
        let p = CalibratorParams::zeros(4, 2, 3, 0.05, Architecture::OneHidden);
        let json = params_to_json(&p).unwrap();
        assert!(params_from_json(&json[..json.len() / 2]).is_err());
        let v2 = json.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            params_from_json(&v2),
            Err(CalibError::UnsupportedVersion(2))
        ));

        let mut f = ParamsFile::from(&p);
        f.b1.push(0.0);
        let tampered = serde_json::to_string(&f).unwrap();
        match params_from_json(&tampered) {
            Err(CalibError::ParamsShape { field, .. }) => assert_eq!(field, "b1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metrics_csv_schema() {
        let r = MetricsReport {
            method: "uncalibrated".into(),
            ece: 0.0871,
            brier: 0.1,
            ks: 0.05,
            auroc: None,
            accuracy: 0.7,
            narrowly_wrong_fraction: 0.0,
            n: 10,
            bins: 25,
        };
        let s = String::from_utf8(metrics_csv(&[r], false).unwrap()).unwrap();
        assert_eq!(
            s,
            "method,ece,bs,ks,auroc,accuracy,n\r\nuncalibrated,8.71,10.00,5.00,,70.00,10\r\n"
        );
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

//! Open-set evaluation and the plain-text report format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::math::{argmax, harmonic_mean, round_1dp};
use crate::scoring::{ClassId, ClassUniverse};
use crate::tuning::LabeledSample;

const HEADER: &str = "# ttpt evaluation report v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    New,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::New => "new",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub id: ClassId,
    pub split: Split,
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEcho {
    pub predictor: String,
    pub seed: u64,
    pub shots: usize,
    pub epochs: usize,
    pub tau: f64,
    pub stage1_tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub echo: RunEcho,
    pub base_acc: f64,
    pub new_acc: f64,
    pub h: f64,
    pub mean_alpha_base: Option<f64>,
    pub mean_alpha_new: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

impl EvalReport {
    /// The report as it reads back after being written: accuracies at one
    /// decimal, α means at four.
    pub fn rounded(&self) -> Self {
        Self {
            echo: self.echo.clone(),
            base_acc: round_1dp(self.base_acc),
            new_acc: round_1dp(self.new_acc),
            h: round_1dp(self.h),
            mean_alpha_base: self.mean_alpha_base.map(|a| round_to(a, 4)),
            mean_alpha_new: self.mean_alpha_new.map(|a| round_to(a, 4)),
            per_class: self.per_class.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let alpha = |a: Option<f64>| a.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "predictor = {}", self.echo.predictor);
        let _ = writeln!(s, "seed = {}", self.echo.seed);
        let _ = writeln!(s, "shots = {}", self.echo.shots);
        let _ = writeln!(s, "epochs = {}", self.echo.epochs);
        let _ = writeln!(s, "tau = {}", self.echo.tau);
        let _ = writeln!(s, "stage1_tau = {}", self.echo.stage1_tau);
        let _ = writeln!(s, "base_acc = {:.1}", round_1dp(self.base_acc));
        let _ = writeln!(s, "new_acc = {:.1}", round_1dp(self.new_acc));
        let _ = writeln!(s, "h = {:.1}", round_1dp(self.h));
        let _ = writeln!(s, "mean_alpha_base = {}", alpha(self.mean_alpha_base));
        let _ = writeln!(s, "mean_alpha_new = {}", alpha(self.mean_alpha_new));
        let _ = writeln!(s, "[per_class]");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{} = {} {}/{} {:.1} {}",
                c.id,
                c.split.as_str(),
                c.correct,
                c.total,
                round_1dp(c.accuracy()),
                c.name
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Report(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == HEADER => {}
            _ => return Err(bad(1, "missing report header")),
        }
        let mut fields = Vec::new();
        for (n, line) in lines.by_ref() {
            if line == "[per_class]" {
                break;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(n, "expected `key = value`"))?;
            fields.push((n, k.to_string(), v.to_string()));
        }
        let expect = [
            "predictor",
            "seed",
            "shots",
            "epochs",
            "tau",
            "stage1_tau",
            "base_acc",
            "new_acc",
            "h",
            "mean_alpha_base",
            "mean_alpha_new",
        ];
        if fields.len() != expect.len() || fields.iter().zip(expect).any(|(f, k)| f.1 != k) {
            return Err(Error::Report("header keys are missing or out of order".into()));
        }
        fn num<T: std::str::FromStr>(f: &(usize, String, String)) -> Result<T> {
            f.2.parse().map_err(|_| Error::Report(format!("line {}: bad value for {}", f.0, f.1)))
        }
        let alpha = |f: &(usize, String, String)| -> Result<Option<f64>> {
            if f.2 == "-" {
                Ok(None)
            } else {
                num(f).map(Some)
            }
        };
        let echo = RunEcho {
            predictor: fields[0].2.clone(),
            seed: num(&fields[1])?,
            shots: num(&fields[2])?,
            epochs: num(&fields[3])?,
            tau: num(&fields[4])?,
            stage1_tau: num(&fields[5])?,
        };
        let mut per_class = Vec::new();
        for (n, line) in lines {
            let (id, rest) = line.split_once(" = ").ok_or_else(|| bad(n, "expected `id = ...`"))?;
            let mut parts = rest.splitn(4, ' ');
            let (split, counts, _acc, name) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                _ => return Err(bad(n, "incomplete class row")),
            };
            let split = match split {
                "base" => Split::Base,
                "new" => Split::New,
                _ => return Err(bad(n, "split must be base or new")),
            };
            let (c, t) = counts.split_once('/').ok_or_else(|| bad(n, "expected correct/total"))?;
            per_class.push(ClassAccuracy {
                id: ClassId(id.parse().map_err(|_| bad(n, "bad class id"))?),
                split,
                name: name.to_string(),
                correct: c.parse().map_err(|_| bad(n, "bad count"))?,
                total: t.parse().map_err(|_| bad(n, "bad count"))?,
            });
        }
        Ok(Self {
            echo,
            base_acc: num(&fields[6])?,
            new_acc: num(&fields[7])?,
            h: num(&fields[8])?,
            mean_alpha_base: alpha(&fields[9])?,
            mean_alpha_new: alpha(&fields[10])?,
            per_class,
        })
    }
}

pub fn emit_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, report.to_text())?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    EvalReport::parse(&fs::read_to_string(path)?)
}

/// Classifies every test sample by the argmax over all K′ classes and
/// tallies base and new accuracy separately.
pub fn evaluate_open<F>(predictor: F, test_pool: &[LabeledSample], universe: &ClassUniverse, echo: RunEcho) -> Result<EvalReport>
where
    F: Fn(&[f64]) -> Result<Prediction>,
{
    let mut per_class: Vec<ClassAccuracy> = universe
        .all_ids()
        .map(|id| {
            Ok(ClassAccuracy {
                id,
                split: if universe.is_base(id) { Split::Base } else { Split::New },
                name: universe.classname(id)?.to_string(),
                correct: 0,
                total: 0,
            })
        })
        .collect::<Result<_>>()?;
    let (mut alpha_base, mut alpha_new) = ((0.0, 0usize), (0.0, 0usize));
    for s in test_pool {
        if !universe.contains(s.label) {
            return Err(Error::Config(format!("test label {} is outside the universe", s.label)));
        }
        let pred = predictor(&s.sample)?;
        if pred.posterior.len() != universe.num_total() {
            return Err(Error::Config(format!(
                "predictor emitted {} probabilities for {} classes",
                pred.posterior.len(),
                universe.num_total()
            )));
        }
        let guess = ClassId::from_index(argmax(&pred.posterior).expect("non-empty posterior"));
        let row = &mut per_class[s.label.index()];
        row.total += 1;
        if guess == s.label {
            row.correct += 1;
        }
        if let Some(a) = pred.alpha {
            let acc = if universe.is_base(s.label) { &mut alpha_base } else { &mut alpha_new };
            acc.0 += a;
            acc.1 += 1;
        }
    }
    let pct = |split: Split| {
        let (c, t) = per_class
            .iter()
            .filter(|r| r.split == split)
            .fold((0, 0), |(c, t), r| (c + r.correct, t + r.total));
        if t == 0 {
            0.0
        } else {
            100.0 * c as f64 / t as f64
        }
    };
    let (base_acc, new_acc) = (pct(Split::Base), pct(Split::New));
    let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
    Ok(EvalReport {
        echo,
        base_acc,
        new_acc,
        h: harmonic_mean(base_acc, new_acc)?,
        mean_alpha_base: mean(alpha_base),
        mean_alpha_new: mean(alpha_new),
        per_class,
    })
}

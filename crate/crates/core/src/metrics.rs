//! Expression-level recognition rates.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::infer::{recognize, BeamOptions};
use crate::model::{Model, Readout};
use crate::tensor::Scalar;
use crate::vocab::Vocab;
use crate::Error;

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn token_edit_distance<A: PartialEq>(pred: &[A], gold: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=gold.len()).collect();
    let mut cur = vec![0; gold.len() + 1];
    for (i, p) in pred.iter().enumerate() {
        cur[0] = i + 1;
        for (j, g) in gold.iter().enumerate() {
            let sub = prev[j] + usize::from(p != g);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[gold.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub prediction: Vec<String>,
    pub distance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub exprate: f64,
    pub leq1: f64,
    pub leq2: f64,
    pub count: usize,
    pub samples: Vec<SampleResult>,
}

impl EvalResult {
    /// Rates from per-sample distances; all zero for an empty set.
    pub fn from_samples(samples: Vec<SampleResult>) -> Self {
        let n = samples.len();
        let rate = |k: usize| {
            if n == 0 {
                0.0
            } else {
                samples.iter().filter(|s| s.distance <= k).count() as f64 / n as f64
            }
        };
        EvalResult { exprate: rate(0), leq1: rate(1), leq2: rate(2), count: n, samples }
    }

    pub fn from_pairs<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Self {
        Self::from_samples(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (p, g))| {
                    let p: Vec<&str> = p.iter().map(AsRef::as_ref).collect();
                    let g: Vec<&str> = g.iter().map(AsRef::as_ref).collect();
                    SampleResult { id: i.to_string(), distance: token_edit_distance(&p, &g), prediction: p.iter().map(|s| s.to_string()).collect() }
                })
                .collect(),
        )
    }

    /// `key: value` lines.
    pub fn report(&self) -> String {
        format!("count: {}\nexprate: {:.6}\nleq1: {:.6}\nleq2: {:.6}\n", self.count, self.exprate, self.leq1, self.leq2)
    }

    /// `id,distance,prediction` rows with a header.
    pub fn csv(&self) -> String {
        let mut s = String::from("id,distance,prediction\n");
        for r in &self.samples {
            s.push_str(&format!("{},{},\"{}\"\n", r.id, r.distance, r.prediction.join(" ").replace('"', "\"\"")));
        }
        s
    }
}

/// Decode every sample and compare token sequences with the labels.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    data: &Dataset,
    readout: Readout,
    opts: &BeamOptions,
) -> Result<EvalResult, Error> {
    let mut out = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let ids = recognize(model, &s.image, readout, opts)?;
        let prediction: Vec<String> = ids.iter().map(|&i| vocab.symbol(i).unwrap_or("<unk>").to_string()).collect();
        let distance = token_edit_distance(&prediction, &s.tokens);
        out.push(SampleResult { id: s.id.clone(), prediction, distance });
    }
    Ok(EvalResult::from_samples(out))
}


//! JSON form of a trained model: item values, bias exponents, the correlation
//! parameters and the normalized co-purchase matrix they act on.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{ItemId, UserId};
use crate::correlation::{CorrelationModel, FitDiagnostics, NormalizedMatrix};
use crate::error::{ProbeError, Result};
use crate::model::{BiasCoefficients, BiasPair, Hyperparams, ModelParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub n_items: usize,
    pub xi: BTreeMap<ItemId, f64>,
    pub alpha_user: BTreeMap<UserId, [f64; 2]>,
    pub alpha_item: BTreeMap<ItemId, [f64; 2]>,
    /// Exponents for users absent from `alpha_user`.
    pub alpha_fallback: [f64; 2],
    /// `(k, m, Φ_km)` with `k` the additional item and `m` the main item.
    pub phi: Vec<(ItemId, ItemId, f64)>,
    pub b: f64,
    pub hyper: Hyperparams,
    /// Nonzero entries of the normalized co-purchase matrix.
    pub r: Vec<(ItemId, ItemId, f64)>,
    pub diagnostics: FitDiagnostics,
}

fn pair(p: BiasPair) -> [f64; 2] {
    [p.plus, p.minus]
}

fn unpair([plus, minus]: [f64; 2]) -> BiasPair {
    BiasPair::new(plus, minus)
}

impl ModelFile {
    pub fn from_parts(params: &ModelParams, correlation: &CorrelationModel) -> Result<Self> {
        let n = params.xi.len();
        if correlation.n() != n {
            return Err(ProbeError::DimensionMismatch {
                expected: n,
                got: correlation.n(),
            });
        }
        Ok(Self {
            version: MODEL_FORMAT_VERSION,
            n_items: n,
            xi: params.xi.iter().copied().enumerate().collect(),
            alpha_user: params.bias.user.iter().map(|(&u, &p)| (u, pair(p))).collect(),
            alpha_item: params.bias.item.iter().map(|&p| pair(p)).enumerate().collect(),
            alpha_fallback: pair(params.bias.fallback),
            phi: correlation.phi.iter().map(|(&(k, m), &v)| (k, m, v)).collect(),
            b: correlation.b,
            hyper: params.hyper,
            r: correlation.r.triplets().collect(),
            diagnostics: correlation.diagnostics.clone(),
        })
    }

    pub fn into_parts(self) -> Result<(ModelParams, CorrelationModel)> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(ProbeError::Validation(format!("unsupported model version {}", self.version)));
        }
        self.hyper.validate()?;
        let n = self.n_items;
        let dense = |keys: Vec<ItemId>, what: &str| -> Result<()> {
            if keys.len() != n || keys.iter().enumerate().any(|(i, &k)| i != k) {
                return Err(ProbeError::Validation(format!("{what} must list items 0..{n} exactly once")));
            }
            Ok(())
        };
        dense(self.xi.keys().copied().collect(), "xi")?;
        dense(self.alpha_item.keys().copied().collect(), "alpha_item")?;
        let finite = self.xi.values().copied().chain([self.b]).chain(self.phi.iter().map(|t| t.2)).chain(self.r.iter().map(|t| t.2));
        let alphas = self
            .alpha_user
            .values()
            .chain(self.alpha_item.values())
            .chain([&self.alpha_fallback])
            .flat_map(|a| a.iter().copied());
        if finite.chain(alphas.clone()).any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite("model file".into()));
        }
        if let Some(a) = alphas.into_iter().find(|&a| a <= 0.0) {
            return Err(ProbeError::NonPositiveExponent(a));
        }
        let mut phi = BTreeMap::new();
        for (k, m, v) in self.phi {
            if k >= n || m >= n {
                return Err(ProbeError::UnknownItem(k.max(m)));
            }
            phi.insert((k, m), v);
        }
        let params = ModelParams {
            bias: BiasCoefficients {
                user: self.alpha_user.into_iter().map(|(u, a)| (u, unpair(a))).collect(),
                item: self.alpha_item.into_values().map(unpair).collect(),
                fallback: unpair(self.alpha_fallback),
            },
            xi: self.xi.into_values().collect(),
            hyper: self.hyper,
        };
        let correlation = CorrelationModel {
            r: NormalizedMatrix::from_triplets(n, self.r)?,
            phi,
            b: self.b,
            diagnostics: self.diagnostics,
        };
        Ok((params, correlation))
    }

    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

pub fn save_model(path: &Path, params: &ModelParams, correlation: &CorrelationModel) -> Result<()> {
    let file = std::fs::File::create(path)?;
    ModelFile::from_parts(params, correlation)?.write_json(std::io::BufWriter::new(file))
}

pub fn load_model(path: &Path) -> Result<(ModelParams, CorrelationModel)> {
    let file = std::fs::File::open(path)?;
    ModelFile::read_json(std::io::BufReader::new(file))
        .map_err(|e| match e {
            ProbeError::Json(j) => ProbeError::Parse {
                path: path.to_path_buf(),
                line: j.line(),
                message: j.to_string(),
            },
            other => other,
        })?
        .into_parts()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::normalize;
    use crate::correlation::CoPurchaseMatrix;

    fn sample() -> (ModelParams, CorrelationModel) {
        let mut params = ModelParams::new(3, Hyperparams::default(), BiasPair::UNBIASED, 0.0);
        params.xi = vec![0.1, -2.5, 1.0 / 3.0];
        params.bias.user.insert(7, BiasPair::new(0.5, 2.0));
        params.bias.item[1] = BiasPair::new(1.25, 0.75);
        let f = CoPurchaseMatrix::from_triplets(3, [(0, 1, 2.0), (1, 0, 2.0), (1, 2, 5.0), (2, 1, 5.0)]).unwrap();
        let mut corr = CorrelationModel::new(normalize(&f));
        corr.phi.insert((1, 0), 0.3);
        corr.phi.insert((2, 1), -1.7);
        corr.b = 0.05;
        (params, corr)
    }

    #[test]
    fn round_trip_is_exact() {
        let (params, corr) = sample();
        let mut buf = Vec::new();
        ModelFile::from_parts(&params, &corr).unwrap().write_json(&mut buf).unwrap();
        let (p2, c2) = ModelFile::read_json(buf.as_slice()).unwrap().into_parts().unwrap();
        assert_eq!(p2, params);
        assert_eq!(c2, corr);
    }

    #[test]
    fn file_uses_documented_keys() {
        let (params, corr) = sample();
        let v = serde_json::to_value(ModelFile::from_parts(&params, &corr).unwrap()).unwrap();
        for key in ["xi", "alpha_user", "alpha_item", "phi", "b", "hyper"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["alpha_user"]["7"], serde_json::json!([0.5, 2.0]));
        assert_eq!(v["phi"][0], serde_json::json!([1, 0, 0.3]));
    }

    #[test]
    fn missing_item_is_rejected() {
        let (params, corr) = sample();
        let mut f = ModelFile::from_parts(&params, &corr).unwrap();
        f.xi.remove(&2);
        assert!(matches!(f.into_parts(), Err(ProbeError::Validation(_))));
    }

    #[test]
    fn non_positive_exponent_is_rejected() {
        let (params, corr) = sample();
        let mut f = ModelFile::from_parts(&params, &corr).unwrap();
        f.alpha_user.insert(9, [0.0, 1.0]);
        assert!(matches!(f.into_parts(), Err(ProbeError::NonPositiveExponent(_))));
    }
}

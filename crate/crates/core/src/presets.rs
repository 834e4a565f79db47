//! Law files and the registry of published fits.
//!
//! A law file is TOML with a `format_version` key and one `[[law]]` table per
//! law. The same schema serves the embedded presets, `--params-file` inputs and
//! fit outputs (which add a `[law.diagnostics]` table).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Factor, FactorMask, ScalingLawParams, TaskKind, ValidityDomain};

pub const FORMAT_VERSION: u32 = 1;

/// The shipped preset file, verbatim.
pub const BUILTIN_PRESETS: &str = include_str!("../presets/presets.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawFile {
    pub format_version: u32,
    #[serde(rename = "law", default)]
    pub laws: Vec<LawRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawRecord {
    pub name: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub factors: Vec<String>,
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_adj_r_squared: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_r_squared: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<ValidityDomain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

/// Fit statistics attached to a law produced by the fitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub r_squared: f64,
    pub adjusted_r_squared: f64,
    pub sse: f64,
    pub n_observations: usize,
    pub free_parameters: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_step_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_fingerprint: Option<String>,
}

impl LawRecord {
    pub fn from_params(name: impl Into<String>, params: &ScalingLawParams) -> Self {
        let mask = params.mask();
        let exp = |f: Factor| mask.contains(f).then(|| params.exponent(f));
        Self {
            name: name.into(),
            task: params.task().label().to_string(),
            source: None,
            factors: mask.iter().map(|f| f.symbol().to_string()).collect(),
            c: params.c(),
            alpha: exp(Factor::N),
            beta: exp(Factor::Cb),
            gamma: exp(Factor::G),
            delta: exp(Factor::Beff),
            reported_adj_r_squared: None,
            reported_r_squared: None,
            domain: params.domain().copied(),
            diagnostics: None,
        }
    }

    pub fn mask(&self) -> Result<FactorMask> {
        let mut mask = FactorMask::EMPTY;
        for name in &self.factors {
            let f: Factor = name.parse()?;
            if mask.contains(f) {
                return Err(self.err(format!("factor {f} listed twice")));
            }
            mask = mask.with(f);
        }
        Ok(mask)
    }

    pub fn to_params(&self) -> Result<ScalingLawParams> {
        let mask = self.mask()?;
        let mut exponents = [0.0; 4];
        for (factor, value) in [
            (Factor::N, self.alpha),
            (Factor::Cb, self.beta),
            (Factor::G, self.gamma),
            (Factor::Beff, self.delta),
        ] {
            match (mask.contains(factor), value) {
                (true, Some(v)) => exponents[factor.index()] = v,
                (true, None) => {
                    return Err(self.err(format!(
                        "factor {factor} is listed but `{}` is missing",
                        factor.exponent_name()
                    )))
                }
                (false, Some(v)) if v != 0.0 => {
                    return Err(self.err(format!(
                        "`{}` = {v} but factor {factor} is not listed",
                        factor.exponent_name()
                    )))
                }
                _ => {}
            }
        }
        ScalingLawParams::new(TaskKind::from_label(&self.task), self.c, exponents, mask)
            .map(|p| p.with_domain(self.domain))
            .map_err(|e| self.err(e.to_string()))
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            what: format!("law `{}`", self.name),
            message,
        }
    }
}

impl LawFile {
    pub fn new(laws: Vec<LawRecord>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            laws,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LawFile = toml::from_str(text).map_err(|e| Error::Parse {
            what: "law file".into(),
            message: e.to_string(),
        })?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                what: "law file".into(),
                message: format!(
                    "unsupported format_version {} (expected {FORMAT_VERSION})",
                    file.format_version
                ),
            });
        }
        Ok(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("law records always serialize")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub params: ScalingLawParams,
    pub source: Option<String>,
    pub reported_adj_r_squared: Option<f64>,
    pub reported_r_squared: Option<f64>,
}

impl Preset {
    pub fn to_record(&self) -> LawRecord {
        LawRecord {
            source: self.source.clone(),
            reported_adj_r_squared: self.reported_adj_r_squared,
            reported_r_squared: self.reported_r_squared,
            ..LawRecord::from_params(&self.name, &self.params)
        }
    }
}

/// Named laws in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetRegistry {
    entries: Vec<Preset>,
}

impl PresetRegistry {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_PRESETS).expect("embedded preset file is valid")
    }

    pub fn from_file(file: &LawFile) -> Result<Self> {
        let mut entries: Vec<Preset> = Vec::with_capacity(file.laws.len());
        for record in &file.laws {
            if entries.iter().any(|p| p.name == record.name) {
                return Err(record.err("duplicate law name".into()));
            }
            entries.push(Preset {
                name: record.name.clone(),
                params: record.to_params()?,
                source: record.source.clone(),
                reported_adj_r_squared: record.reported_adj_r_squared,
                reported_r_squared: record.reported_r_squared,
            });
        }
        Ok(Self { entries })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_file(&LawFile::from_toml_str(text)?)
    }

    pub fn to_file(&self) -> LawFile {
        LawFile::new(self.entries.iter().map(Preset::to_record).collect())
    }

    pub fn to_toml_string(&self) -> String {
        self.to_file().to_toml_string()
    }

    pub fn get(&self, name: &str) -> Option<&Preset> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn params(&self, name: &str) -> Option<&ScalingLawParams> {
        self.get(name).map(|p| &p.params)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Preset> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_loads() {
        let reg = PresetRegistry::builtin();
        assert_eq!(reg.len(), 10);
        let mask = reg.params("opt-2bit").unwrap().mask();
        assert!(!mask.contains(Factor::Beff));
        assert_eq!(reg.params("opt-mem").unwrap().task(), &TaskKind::Memorization);
    }

    #[test]
    fn missing_exponent_is_rejected() {
        let text = r#"
format_version = 1
[[law]]
name = "x"
task = "general"
factors = ["N", "B_eff"]
c = 0.1
alpha = 0.1
"#;
        let err = PresetRegistry::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn stray_exponent_is_rejected() {
        let text = r#"
format_version = 1
[[law]]
name = "x"
task = "general"
factors = ["N"]
c = 0.1
alpha = 0.1
gamma = -0.01
"#;
        assert!(PresetRegistry::from_toml_str(text).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        assert!(LawFile::from_toml_str("format_version = 7\n").is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let law = "[[law]]\nname = \"a\"\ntask = \"general\"\nfactors = []\nc = 0.3\n";
        let text = format!("format_version = 1\n{law}{law}");
        assert!(PresetRegistry::from_toml_str(&text).is_err());
    }

    #[test]
    fn custom_task_label_survives() {
        let p = ScalingLawParams::constant(TaskKind::Custom("lambada".into()), 0.5).unwrap();
        let rec = LawRecord::from_params("l", &p);
        let text = LawFile::new(vec![rec]).to_toml_string();
        let back = LawFile::from_toml_str(&text).unwrap().laws[0].to_params().unwrap();
        assert_eq!(back, p);
    }
}

//! The JSON quality report.
//!
//! Reports carry no timestamps or paths, so identical input bytes and
//! identical settings always serialise to identical bytes. Units for every
//! numeric field are published in `docs/report.schema.json`.

use serde::{Deserialize, Serialize};

use crate::container::SourceFormat;
use crate::noise::{NoObjectReason, NoiseEstimate, SearchConfig, SearchModeUsed, ThresholdResult};
use crate::resolution::{QualityScore, ResolutionCurve};
use crate::volume::Volume;

pub const TOOL_NAME: &str = "qbench";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fraction of exactly-zero pixels above which the input is flagged as
/// possibly masked.
pub const MASKED_ZERO_WARNING: f64 = 0.5;

/// Below this edge length `m = 1.5` is less reliable on scanner data.
pub const FINE_RESOLUTION_MM: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub sha256: String,
    pub format: SourceFormat,
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub effective_resolution_mm: f64,
    pub intensity_max: f64,
    pub zero_fraction: f64,
}

impl InputSummary {
    pub fn new(volume: &Volume, sha256: String, format: SourceFormat) -> Self {
        let (w, h, n) = volume.dims();
        InputSummary {
            sha256,
            format,
            dims: [w, h, n],
            voxel_size_mm: volume.voxel_size().0,
            effective_resolution_mm: volume.voxel_size().effective_resolution(),
            intensity_max: volume.intensity_max(),
            zero_fraction: volume.zero_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub t_opt: f64,
    pub t_argmin: f64,
    pub t_lower: f64,
    pub t_max: f64,
    pub no_object: bool,
    pub no_object_reason: Option<NoObjectReason>,
    pub mode_used: SearchModeUsed,
    pub evaluations: usize,
    pub grid_len: usize,
    pub t_start_effective: f64,
    pub epsilon_effective: f64,
    pub variance_at_t_opt: Option<f64>,
    pub mean_sigma_at_t_opt: Option<f64>,
}

impl From<&ThresholdResult> for ThresholdSummary {
    fn from(r: &ThresholdResult) -> Self {
        let at = r.sample_at_opt();
        ThresholdSummary {
            t_opt: r.t_opt,
            t_argmin: r.t_argmin,
            t_lower: r.t_lower,
            t_max: r.t_max,
            no_object: r.no_object,
            no_object_reason: r.no_object_reason,
            mode_used: r.mode_used,
            evaluations: r.evaluations,
            grid_len: r.grid_len,
            t_start_effective: r.t_start_effective,
            epsilon_effective: r.epsilon_effective,
            variance_at_t_opt: at.map(|s| s.variance),
            mean_sigma_at_t_opt: at.map(|s| s.mean_sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub sigma: f64,
    pub signal_mean: f64,
    pub snr: f64,
    pub correction_factor: f64,
    pub object_pixels: usize,
    pub per_slice_sigma: Vec<Option<f64>>,
    pub skipped_slices: Vec<usize>,
}

impl From<&NoiseEstimate> for EstimateSummary {
    fn from(e: &NoiseEstimate) -> Self {
        EstimateSummary {
            sigma: e.sigma,
            signal_mean: e.signal_mean,
            snr: e.snr,
            correction_factor: e.correction_factor,
            object_pixels: e.object_pixels,
            per_slice_sigma: e.per_slice_sigma.clone(),
            skipped_slices: e.skipped_slices.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub input: InputSummary,
    pub config: SearchConfig,
    pub threshold: ThresholdSummary,
    pub estimate: EstimateSummary,
    pub curve: Option<ResolutionCurve>,
    pub score: Option<QualityScore>,
    pub warnings: Vec<String>,
}

impl QualityReport {
    /// Assembles a report and derives its warnings. `load_warnings` come
    /// from the input loader and are listed first.
    pub fn new(
        command: &str,
        input: InputSummary,
        config: SearchConfig,
        estimate: &NoiseEstimate,
        curve: Option<ResolutionCurve>,
        score: Option<QualityScore>,
        load_warnings: &[String],
    ) -> Self {
        let mut warnings = load_warnings.to_vec();
        warnings.extend(derive_warnings(&input, estimate, curve.as_ref()));
        QualityReport {
            tool: TOOL_NAME.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            input,
            config,
            threshold: ThresholdSummary::from(&estimate.threshold),
            estimate: EstimateSummary::from(estimate),
            curve,
            score,
            warnings,
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialisation cannot fail");
        s.push('\n');
        s
    }
}

fn derive_warnings(
    input: &InputSummary,
    est: &NoiseEstimate,
    curve: Option<&ResolutionCurve>,
) -> Vec<String> {
    let mut w = Vec::new();
    if input.zero_fraction > MASKED_ZERO_WARNING {
        w.push(format!(
            "{:.1}% of pixels are exactly zero; the background may have been masked, which biases the noise estimate",
            100.0 * input.zero_fraction
        ));
    }
    let t = &est.threshold;
    if t.no_object {
        let why = match t.no_object_reason {
            Some(NoObjectReason::GuardRejected) => {
                "the variance minimum fails the mean-sigma guard"
            }
            Some(NoObjectReason::NoDescent) => "the variance curve never descends",
            Some(NoObjectReason::MinimumAtTmax) => "the variance minimum lies at t_max",
            Some(NoObjectReason::EmptyVolume) => "every pixel is zero",
            None => "unknown",
        };
        w.push(format!(
            "no object detected ({why}); t_opt = t_max, signal_mean and snr are reported as 0"
        ));
    }
    if t.mode_used == SearchModeUsed::ExhaustiveFallback {
        w.push(format!(
            "bracketed search could not certify the minimum and fell back to an exhaustive scan ({} evaluations)",
            t.evaluations
        ));
    }
    if !est.skipped_slices.is_empty() {
        w.push(format!(
            "{} slice(s) had no positive background pixels at t_opt and were skipped: {:?}",
            est.skipped_slices.len(),
            est.skipped_slices
        ));
    }
    if let Some(c) = curve {
        for f in &c.failures {
            w.push(format!(
                "resolution point at factor {} failed: {}",
                f.factor, f.reason
            ));
        }
        if c.points
            .iter()
            .any(|p| p.resolution_mm < FINE_RESOLUTION_MM)
        {
            w.push(format!(
                "curve includes resolutions finer than {FINE_RESOLUTION_MM} mm, where m = 1.5 is a weaker approximation on scanner data"
            ));
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Dtype;
    use crate::noise::estimate;
    use crate::phantom::{generate, PhantomSpec};
    use serde_json::Value;

    const SCHEMA: &str = include_str!("../../../docs/report.schema.json");

    fn sample_report() -> QualityReport {
        let mut spec = PhantomSpec::blank(24, 24, 4, 20.0, 3);
        spec.background_value = 0.0;
        let v = generate(&spec).unwrap();
        let cfg = SearchConfig::default();
        let est = estimate(&v, &cfg).unwrap();
        let input = InputSummary::new(
            &v,
            "00".repeat(32),
            SourceFormat::Qvol1 { dtype: Dtype::F32 },
        );
        QualityReport::new("estimate", input, cfg, &est, None, None, &[])
    }

    /// Every numeric leaf in the schema must declare a unit.
    fn check_units(node: &Value, path: &str, missing: &mut Vec<String>) {
        let Some(obj) = node.as_object() else { return };
        let numeric = match obj.get("type") {
            Some(Value::String(t)) => t == "number" || t == "integer",
            Some(Value::Array(ts)) => ts.iter().any(|t| t == "number" || t == "integer"),
            _ => false,
        };
        if numeric && !obj.contains_key("x-unit") {
            missing.push(path.to_string());
        }
        for (k, v) in obj {
            match v {
                Value::Object(_) => check_units(v, &format!("{path}/{k}"), missing),
                Value::Array(items) => {
                    for (i, item) in items.iter().enumerate() {
                        check_units(item, &format!("{path}/{k}/{i}"), missing);
                    }
                }
                _ => {}
            }
        }
    }

    #[test]
    fn every_numeric_schema_field_has_a_unit() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let mut missing = Vec::new();
        check_units(&schema, "#", &mut missing);
        assert!(missing.is_empty(), "fields without x-unit: {missing:?}");
    }

    /// Resolves a local `$ref` if present.
    fn deref<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
        match node.get("$ref").and_then(Value::as_str) {
            Some(r) => r
                .trim_start_matches("#/")
                .split('/')
                .fold(root, |n, k| &n[k]),
            None => node,
        }
    }

    fn check_keys(root: &Value, schema: &Value, value: &Value, path: &str, bad: &mut Vec<String>) {
        let schema = deref(root, schema);
        if let Some(options) = schema.get("anyOf").and_then(Value::as_array) {
            if !value.is_null() {
                if let Some(o) = options
                    .iter()
                    .find(|o| deref(root, o).get("type") != Some(&Value::from("null")))
                {
                    check_keys(root, o, value, path, bad);
                }
            }
            return;
        }
        match value {
            Value::Object(map) => {
                let props = schema.get("properties").and_then(Value::as_object);
                for (k, v) in map {
                    match props.and_then(|p| p.get(k)) {
                        Some(s) => check_keys(root, s, v, &format!("{path}/{k}"), bad),
                        None => {
                            if schema
                                .get("additionalProperties")
                                .is_none_or(|a| a == false)
                            {
                                bad.push(format!("{path}/{k}"));
                            }
                        }
                    }
                }
                if let Some(req) = schema.get("required").and_then(Value::as_array) {
                    for r in req {
                        if !map.contains_key(r.as_str().unwrap()) {
                            bad.push(format!("{path}/{} (missing)", r.as_str().unwrap()));
                        }
                    }
                }
            }
            Value::Array(items) => {
                if let Some(s) = schema.get("items") {
                    for (i, item) in items.iter().enumerate() {
                        check_keys(root, s, item, &format!("{path}/{i}"), bad);
                    }
                }
            }
            _ => {}
        }
    }

    #[test]
    fn report_matches_schema_keys() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let report: Value = serde_json::from_str(&sample_report().to_json()).unwrap();
        let mut bad = Vec::new();
        check_keys(&schema, &schema, &report, "#", &mut bad);
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn report_is_reproducible() {
        assert_eq!(sample_report().to_json(), sample_report().to_json());
    }

    #[test]
    fn pure_noise_input_warns_about_no_object() {
        let r = sample_report();
        if r.threshold.no_object {
            assert!(r.warnings.iter().any(|w| w.starts_with("no object")));
            assert_eq!(r.estimate.snr, 0.0);
        }
    }
}

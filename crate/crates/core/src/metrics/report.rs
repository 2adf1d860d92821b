use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// mAP of one patch variant on every detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub variant: String,
    pub map: BTreeMap<String, f64>,
    pub ts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub config_digest: String,
    /// Seconds since the epoch; only filled when the caller pins a build time.
    pub created_at: Option<u64>,
    /// mAP per detector with the evaluated patch applied.
    pub map: BTreeMap<String, f64>,
    pub rows: Vec<MapRow>,
    pub ns: Option<f64>,
    pub ts: Option<f64>,
    pub asr: Option<f64>,
    pub loss: Option<LossBreakdown>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            ..Self::default()
        }
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report is serializable");
        let mut s = serde_json::to_string_pretty(&value).expect("value is serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad report: {e}")))
    }

    /// One row per patch variant, one column per detector, then TS.
    pub fn to_csv(&self) -> String {
        let detectors: Vec<&String> = {
            let mut all: Vec<&String> = self.rows.iter().flat_map(|r| r.map.keys()).collect();
            all.sort();
            all.dedup();
            all
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string()];
        header.extend(detectors.iter().map(|d| d.to_string()));
        header.push("ts".into());
        w.write_record(&header).expect("in-memory csv");
        for row in &self.rows {
            let mut rec = vec![row.variant.clone()];
            rec.extend(
                detectors
                    .iter()
                    .map(|d| row.map.get(*d).map(|v| format!("{v:.6}")).unwrap_or_default()),
            );
            rec.push(row.ts.map(|v| format!("{v:.6}")).unwrap_or_default());
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf-8 csv")
    }

    pub fn write(&self, json_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = MetricsReport::new("abc123");
        r.map.insert("toy-7".into(), 0.123456789012345);
        r.map.insert("toy-3".into(), 1.0 / 3.0);
        r.rows.push(MapRow {
            variant: "grey".into(),
            map: r.map.clone(),
            ts: Some(0.0),
        });
        r.ns = Some(42.0);
        r.loss = Some(LossBreakdown {
            obj: 0.1,
            css: 0.2,
            tv: 0.3,
            nps: 0.4,
            total: 1.0 + 1e-17,
        });
        r
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = sample();
        let text = r.to_json();
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
        // Keys are sorted.
        let asr = text.find("\"asr\"").unwrap();
        let digest = text.find("\"config_digest\"").unwrap();
        assert!(asr < digest);
    }

    #[test]
    fn csv_layout() {
        let csv = sample().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,toy-3,toy-7,ts");
        assert_eq!(lines.next().unwrap(), "grey,0.333333,0.123457,0.000000");
    }
}

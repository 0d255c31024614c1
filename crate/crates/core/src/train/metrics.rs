//! Per-step metrics records, streamed as newline-delimited JSON with a
//! versioned header line.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA: &str = "moelab.metrics";
pub const METRICS_VERSION: u32 = 1;

/// First line of every metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub version: u32,
}

impl Default for MetricsHeader {
    fn default() -> Self {
        MetricsHeader {
            schema: METRICS_SCHEMA.to_string(),
            version: METRICS_VERSION,
        }
    }
}

/// One pool's routing statistics for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMetrics {
    pub raw_loads: Vec<u64>,
    pub load_fraction: Vec<f64>,
    pub mean_prob: Vec<f64>,
    pub lb: f64,
    pub z: f64,
    pub dropped: u64,
    pub slots: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    /// max/mean load ratio, averaged over the layer's pools.
    pub imbalance: f64,
    pub pools: Vec<PoolMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCe {
    pub domain: String,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub train_ce: f64,
    /// Raw LB loss summed over layers and pools (unweighted).
    pub lb_loss: f64,
    /// Raw z-loss summed over layers and pools (unweighted).
    pub z_loss: f64,
    pub total_loss: f64,
    pub imbalance_per_layer: Vec<f64>,
    pub dropped_fraction: f64,
    pub layers: Vec<LayerMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_macro_ce: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval_domains: Vec<DomainCe>,
}

/// max(loads) / mean(loads); `None` when every load is zero.
pub fn load_imbalance(loads: &[u64]) -> Option<f64> {
    let total: u64 = loads.iter().sum();
    if loads.is_empty() || total == 0 {
        return None;
    }
    let mean = total as f64 / loads.len() as f64;
    let max = *loads.iter().max().expect("non-empty") as f64;
    Some(max / mean)
}

/// Streams the header and records as NDJSON.
pub fn write_metrics<W: Write>(mut w: W, records: &[MetricsRecord]) -> io::Result<()> {
    serde_json::to_writer(&mut w, &MetricsHeader::default())?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a metrics stream, validating the header.
pub fn read_metrics<R: BufRead>(r: R) -> io::Result<Vec<MetricsRecord>> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "empty metrics stream"))??;
    let header: MetricsHeader = serde_json::from_str(&header_line)?;
    if header.schema != METRICS_SCHEMA || header.version != METRICS_VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported metrics schema {}/{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imbalance_cases() {
        assert_eq!(load_imbalance(&[2, 2, 2, 2]), Some(1.0));
        assert_eq!(load_imbalance(&[8, 0, 0, 0]), Some(4.0));
        assert_eq!(load_imbalance(&[3, 1]), Some(1.5));
        assert_eq!(load_imbalance(&[0, 0]), None);
        assert_eq!(load_imbalance(&[]), None);
    }

    #[test]
    fn ndjson_round_trip() {
        let rec = MetricsRecord {
            step: 3,
            lr: 1e-4,
            train_ce: 2.5,
            lb_loss: 1.01,
            z_loss: 0.2,
            total_loss: 2.51,
            imbalance_per_layer: vec![1.25, 1.0],
            dropped_fraction: 0.0,
            layers: vec![LayerMetrics {
                imbalance: 1.25,
                pools: vec![PoolMetrics {
                    raw_loads: vec![3, 1],
                    load_fraction: vec![0.75, 0.25],
                    mean_prob: vec![0.6, 0.4],
                    lb: 1.01,
                    z: 0.2,
                    dropped: 0,
                    slots: 4,
                }],
            }],
            eval_macro_ce: Some(2.9),
            eval_domains: vec![DomainCe {
                domain: "web".to_string(),
                ce: 2.9,
            }],
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"schema\":\"moelab.metrics\",\"version\":1}\n"));
        let back = read_metrics(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn rejects_missing_header() {
        let body = b"{\"step\":0}\n";
        assert!(read_metrics(&body[..]).is_err());
    }
}

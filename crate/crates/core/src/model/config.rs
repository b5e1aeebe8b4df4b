//! JSON schema (`"spec_version": 1`) for model and cluster descriptions.
//!
//! Parsing walks the document by hand so that every error carries the path
//! of the offending key, e.g. `$.tables[3].dim`.

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::generate::truncated_exponential_dims;
use super::{
    BandwidthPoint, ClusterSpec, IndexSkew, MlpLayer, ModelSpec, NumericFormat, PeakFlops, Precision, TableSpec,
};

pub const SPEC_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("missing key {0}")]
    MissingKey(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("invalid value at {path}: {reason}")]
    InvalidValue { path: String, reason: String },
}

type Result<T> = std::result::Result<T, SpecError>;

fn invalid(path: &str, reason: impl Into<String>) -> SpecError {
    SpecError::InvalidValue { path: path.to_string(), reason: reason.into() }
}

fn object<'a>(v: &'a Value, path: &str, allowed: &[&str]) -> Result<&'a Map<String, Value>> {
    let map = v.as_object().ok_or_else(|| invalid(path, "expected an object"))?;
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(SpecError::UnknownKey(format!("{path}.{key}")));
        }
    }
    Ok(map)
}

fn required<'a>(map: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    map.get(key).ok_or_else(|| SpecError::MissingKey(format!("{path}.{key}")))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    if let Some(n) = v.as_u64() {
        return Ok(n);
    }
    // Accept integral floats such as 1.5e12.
    match v.as_f64() {
        Some(f) if f >= 0.0 && f.fract() == 0.0 && f < u64::MAX as f64 => Ok(f as u64),
        _ => Err(invalid(path, "expected a non-negative integer")),
    }
}

fn as_usize(v: &Value, path: &str) -> Result<usize> {
    as_u64(v, path).map(|n| n as usize)
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().filter(|f| f.is_finite()).ok_or_else(|| invalid(path, "expected a finite number"))
}

fn as_str<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| invalid(path, "expected a string"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| invalid(path, "expected an array"))
}

fn check_version(map: &Map<String, Value>) -> Result<()> {
    let v = as_u64(required(map, "$", "spec_version")?, "$.spec_version")?;
    if v != SPEC_VERSION {
        return Err(invalid("$.spec_version", format!("unsupported version {v}")));
    }
    Ok(())
}

fn parse_precision(v: &Value, path: &str) -> Result<Precision> {
    match as_str(v, path)?.to_ascii_lowercase().as_str() {
        "fp32" => Ok(Precision::Fp32),
        "fp16" => Ok(Precision::Fp16),
        other => Err(invalid(path, format!("unknown precision {other:?}"))),
    }
}

fn parse_format(v: &Value, path: &str) -> Result<NumericFormat> {
    let s = as_str(v, path)?;
    NumericFormat::parse(s).ok_or_else(|| invalid(path, format!("unknown numeric format {s:?}")))
}

fn parse_skew(v: &Value, path: &str) -> Result<IndexSkew> {
    if let Some(s) = v.as_str() {
        return match s {
            "uniform" => Ok(IndexSkew::Uniform),
            other => Err(invalid(path, format!("unknown skew {other:?}"))),
        };
    }
    let map = object(v, path, &["zipf"])?;
    let alpha = as_f64(required(map, path, "zipf")?, &format!("{path}.zipf"))?;
    if alpha <= 0.0 {
        return Err(invalid(&format!("{path}.zipf"), "alpha must be > 0"));
    }
    Ok(IndexSkew::Zipf { alpha })
}

fn parse_layers(v: &Value, path: &str) -> Result<Vec<MlpLayer>> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let p = format!("{path}[{i}]");
            let pair = as_array(layer, &p)?;
            if pair.len() != 2 {
                return Err(invalid(&p, "expected [in, out]"));
            }
            let input = as_usize(&pair[0], &format!("{p}[0]"))?;
            let output = as_usize(&pair[1], &format!("{p}[1]"))?;
            if input == 0 || output == 0 {
                return Err(invalid(&p, "layer sizes must be >= 1"));
            }
            Ok(MlpLayer::new(input, output))
        })
        .collect()
}

fn positive_pooling(v: &Value, path: &str) -> Result<f64> {
    let p = as_f64(v, path)?;
    if p <= 0.0 {
        return Err(invalid(path, "pooling must be > 0"));
    }
    Ok(p)
}

fn parse_table(v: &Value, path: &str) -> Result<TableSpec> {
    let map = object(v, path, &["id", "rows", "dim", "pooling", "precision", "skew"])?;
    let id = as_str(required(map, path, "id")?, &format!("{path}.id"))?.to_string();
    let rows = as_u64(required(map, path, "rows")?, &format!("{path}.rows"))?;
    if rows == 0 {
        return Err(invalid(&format!("{path}.rows"), "rows must be >= 1"));
    }
    let dim = as_usize(required(map, path, "dim")?, &format!("{path}.dim"))?;
    if dim == 0 {
        return Err(invalid(&format!("{path}.dim"), "dim must be >= 1"));
    }
    let avg_pooling = positive_pooling(required(map, path, "pooling")?, &format!("{path}.pooling"))?;
    let precision = match map.get("precision") {
        Some(p) => parse_precision(p, &format!("{path}.precision"))?,
        None => Precision::Fp32,
    };
    let skew = match map.get("skew") {
        Some(s) => parse_skew(s, &format!("{path}.skew"))?,
        None => IndexSkew::Uniform,
    };
    Ok(TableSpec { id, num_rows: rows, dim, avg_pooling, precision, skew })
}

/// Expands a `table_groups` entry into concrete tables.
fn parse_group(v: &Value, path: &str) -> Result<Vec<TableSpec>> {
    let map = object(v, path, &["prefix", "count", "rows", "dim", "pooling", "precision", "skew"])?;
    let prefix = as_str(required(map, path, "prefix")?, &format!("{path}.prefix"))?;
    let count = as_usize(required(map, path, "count")?, &format!("{path}.count"))?;
    let dim_path = format!("{path}.dim");
    let dim_v = required(map, path, "dim")?;
    let dims = if dim_v.is_object() {
        let d = object(dim_v, &dim_path, &["min", "max", "mean", "step"])?;
        let min = as_usize(required(d, &dim_path, "min")?, &format!("{dim_path}.min"))?;
        let max = as_usize(required(d, &dim_path, "max")?, &format!("{dim_path}.max"))?;
        let mean = as_f64(required(d, &dim_path, "mean")?, &format!("{dim_path}.mean"))?;
        let step = match d.get("step") {
            Some(s) => as_usize(s, &format!("{dim_path}.step"))?,
            None => 1,
        };
        truncated_exponential_dims(count, min, max, mean, step).map_err(|e| invalid(&dim_path, e))?
    } else {
        let d = as_usize(dim_v, &dim_path)?;
        if d == 0 {
            return Err(invalid(&dim_path, "dim must be >= 1"));
        }
        vec![d; count]
    };
    let rows_path = format!("{path}.rows");
    let rows_v = required(map, path, "rows")?;
    let rows = if rows_v.is_object() {
        let r = object(rows_v, &rows_path, &["total_params"])?;
        let total = as_u64(required(r, &rows_path, "total_params")?, &format!("{rows_path}.total_params"))?;
        let dim_sum: u64 = dims.iter().map(|&d| d as u64).sum();
        total.checked_div(dim_sum).map_or(0, |r| r.max(1))
    } else {
        as_u64(rows_v, &rows_path)?
    };
    if rows == 0 && count > 0 {
        return Err(invalid(&rows_path, "rows must be >= 1"));
    }
    let pooling = positive_pooling(required(map, path, "pooling")?, &format!("{path}.pooling"))?;
    let precision = match map.get("precision") {
        Some(p) => parse_precision(p, &format!("{path}.precision"))?,
        None => Precision::Fp32,
    };
    let skew = match map.get("skew") {
        Some(s) => parse_skew(s, &format!("{path}.skew"))?,
        None => IndexSkew::Uniform,
    };
    Ok(dims
        .into_iter()
        .enumerate()
        .map(|(i, dim)| TableSpec {
            id: format!("{prefix}{i}"),
            num_rows: rows,
            dim,
            avg_pooling: pooling,
            precision,
            skew,
        })
        .collect())
}

/// Parses and validates a model description.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let doc: Value = serde_json::from_str(text).map_err(|e| SpecError::MalformedDocument(e.to_string()))?;
    let map = object(
        &doc,
        "$",
        &[
            "spec_version",
            "name",
            "description",
            "local_batch",
            "mflops_per_sample",
            "dense_precision",
            "bottom_mlp",
            "top_mlp",
            "interaction_flops_per_sample",
            "dense_param_bytes",
            "tables",
            "table_groups",
        ],
    )?;
    check_version(map)?;
    let name = match map.get("name") {
        Some(n) => as_str(n, "$.name")?.to_string(),
        None => String::from("model"),
    };
    let local_batch = as_usize(required(map, "$", "local_batch")?, "$.local_batch")?;
    if local_batch == 0 {
        return Err(invalid("$.local_batch", "must be >= 1"));
    }
    let mflops_per_sample = as_f64(required(map, "$", "mflops_per_sample")?, "$.mflops_per_sample")?;
    if mflops_per_sample < 0.0 {
        return Err(invalid("$.mflops_per_sample", "must be >= 0"));
    }
    let dense_precision = match map.get("dense_precision") {
        Some(v) => parse_format(v, "$.dense_precision")?,
        None => NumericFormat::Fp32,
    };
    let bottom_mlp = match map.get("bottom_mlp") {
        Some(v) => parse_layers(v, "$.bottom_mlp")?,
        None => Vec::new(),
    };
    let top_mlp = match map.get("top_mlp") {
        Some(v) => parse_layers(v, "$.top_mlp")?,
        None => Vec::new(),
    };
    let mut tables = Vec::new();
    if let Some(v) = map.get("tables") {
        for (i, t) in as_array(v, "$.tables")?.iter().enumerate() {
            tables.push(parse_table(t, &format!("$.tables[{i}]"))?);
        }
    }
    if let Some(v) = map.get("table_groups") {
        for (i, g) in as_array(v, "$.table_groups")?.iter().enumerate() {
            tables.extend(parse_group(g, &format!("$.table_groups[{i}]"))?);
        }
    }

    let mut model = ModelSpec {
        name,
        tables,
        bottom_mlp,
        top_mlp,
        interaction_flops_per_sample: 0.0,
        mflops_per_sample,
        local_batch,
        dense_param_bytes: 0,
        dense_precision,
    };
    model.interaction_flops_per_sample = match map.get("interaction_flops_per_sample") {
        Some(v) => {
            let f = as_f64(v, "$.interaction_flops_per_sample")?;
            if f < 0.0 {
                return Err(invalid("$.interaction_flops_per_sample", "must be >= 0"));
            }
            f
        }
        None => model.default_interaction_flops(),
    };
    let layer_bytes = model.mlp_param_bytes();
    model.dense_param_bytes = match map.get("dense_param_bytes") {
        Some(v) => as_u64(v, "$.dense_param_bytes")?,
        None => layer_bytes,
    };
    model.validate().map_err(|reason| invalid("$", reason))?;
    Ok(model)
}

fn skew_json(s: IndexSkew) -> Value {
    match s {
        IndexSkew::Uniform => json!("uniform"),
        IndexSkew::Zipf { alpha } => json!({ "zipf": alpha }),
    }
}

fn layers_json(layers: &[MlpLayer]) -> Value {
    Value::Array(layers.iter().map(|l| json!([l.input, l.output])).collect())
}

/// Serializes a model with every table listed explicitly.
pub fn model_to_json(model: &ModelSpec) -> Value {
    let tables: Vec<Value> = model
        .tables
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "rows": t.num_rows,
                "dim": t.dim,
                "pooling": t.avg_pooling,
                "precision": t.precision.name(),
                "skew": skew_json(t.skew),
            })
        })
        .collect();
    json!({
        "spec_version": SPEC_VERSION,
        "name": model.name,
        "local_batch": model.local_batch,
        "mflops_per_sample": model.mflops_per_sample,
        "dense_precision": model.dense_precision.name(),
        "bottom_mlp": layers_json(&model.bottom_mlp),
        "top_mlp": layers_json(&model.top_mlp),
        "interaction_flops_per_sample": model.interaction_flops_per_sample,
        "dense_param_bytes": model.dense_param_bytes,
        "tables": tables,
    })
}

fn parse_points(v: &Value, path: &str) -> Result<Vec<BandwidthPoint>> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pp = format!("{path}[{i}]");
            let pair = as_array(p, &pp)?;
            if pair.len() != 2 {
                return Err(invalid(&pp, "expected [message_bytes, bytes_per_sec]"));
            }
            Ok(BandwidthPoint::new(as_u64(&pair[0], &format!("{pp}[0]"))?, as_f64(&pair[1], &format!("{pp}[1]"))?))
        })
        .collect()
}

/// Parses and validates a cluster description.
pub fn parse_cluster_spec(text: &str) -> Result<ClusterSpec> {
    let doc: Value = serde_json::from_str(text).map_err(|e| SpecError::MalformedDocument(e.to_string()))?;
    let map = object(
        &doc,
        "$",
        &[
            "spec_version",
            "name",
            "description",
            "num_nodes",
            "gpus_per_node",
            "hbm_capacity_per_gpu",
            "hbm_bw",
            "dram_capacity_per_node",
            "dram_to_gpu_bw",
            "scaleup_bw",
            "scaleup_efficiency",
            "scaleout_bw_per_gpu",
            "peak_flops",
            "mlp_efficiency",
            "alltoall_bw_points",
            "allreduce_bw_points",
            "fixed_latency_per_collective",
        ],
    )?;
    check_version(map)?;
    let get_u = |key: &str| -> Result<u64> { as_u64(required(map, "$", key)?, &format!("$.{key}")) };
    let get_f = |key: &str| -> Result<f64> { as_f64(required(map, "$", key)?, &format!("$.{key}")) };
    let pf = required(map, "$", "peak_flops")?;
    let pfm = object(pf, "$.peak_flops", &["fp32", "tf32", "fp16", "bf16"])?;
    let flops =
        |key: &str| -> Result<f64> { as_f64(required(pfm, "$.peak_flops", key)?, &format!("$.peak_flops.{key}")) };
    let cluster = ClusterSpec {
        name: match map.get("name") {
            Some(n) => as_str(n, "$.name")?.to_string(),
            None => String::from("cluster"),
        },
        num_nodes: get_u("num_nodes")? as usize,
        gpus_per_node: get_u("gpus_per_node")? as usize,
        hbm_capacity_per_gpu: get_u("hbm_capacity_per_gpu")?,
        hbm_bw: get_f("hbm_bw")?,
        dram_capacity_per_node: get_u("dram_capacity_per_node")?,
        dram_to_gpu_bw: get_f("dram_to_gpu_bw")?,
        scaleup_bw: get_f("scaleup_bw")?,
        scaleup_efficiency: match map.get("scaleup_efficiency") {
            Some(v) => as_f64(v, "$.scaleup_efficiency")?,
            None => 1.0,
        },
        scaleout_bw_per_gpu: get_f("scaleout_bw_per_gpu")?,
        peak_flops: PeakFlops {
            fp32: flops("fp32")?,
            tf32: flops("tf32")?,
            fp16: flops("fp16")?,
            bf16: flops("bf16")?,
        },
        mlp_efficiency: get_f("mlp_efficiency")?,
        alltoall_bw_points: parse_points(required(map, "$", "alltoall_bw_points")?, "$.alltoall_bw_points")?,
        allreduce_bw_points: parse_points(required(map, "$", "allreduce_bw_points")?, "$.allreduce_bw_points")?,
        fixed_latency_per_collective: match map.get("fixed_latency_per_collective") {
            Some(v) => as_f64(v, "$.fixed_latency_per_collective")?,
            None => 20e-6,
        },
    };
    cluster.validate().map_err(|reason| invalid("$", reason))?;
    Ok(cluster)
}

pub fn cluster_to_json(c: &ClusterSpec) -> Value {
    let points = |ps: &[BandwidthPoint]| -> Value {
        Value::Array(ps.iter().map(|p| json!([p.message_bytes, p.bytes_per_sec])).collect())
    };
    json!({
        "spec_version": SPEC_VERSION,
        "name": c.name,
        "num_nodes": c.num_nodes,
        "gpus_per_node": c.gpus_per_node,
        "hbm_capacity_per_gpu": c.hbm_capacity_per_gpu,
        "hbm_bw": c.hbm_bw,
        "dram_capacity_per_node": c.dram_capacity_per_node,
        "dram_to_gpu_bw": c.dram_to_gpu_bw,
        "scaleup_bw": c.scaleup_bw,
        "scaleup_efficiency": c.scaleup_efficiency,
        "scaleout_bw_per_gpu": c.scaleout_bw_per_gpu,
        "peak_flops": {
            "fp32": c.peak_flops.fp32,
            "tf32": c.peak_flops.tf32,
            "fp16": c.peak_flops.fp16,
            "bf16": c.peak_flops.bf16,
        },
        "mlp_efficiency": c.mlp_efficiency,
        "alltoall_bw_points": points(&c.alltoall_bw_points),
        "allreduce_bw_points": points(&c.allreduce_bw_points),
        "fixed_latency_per_collective": c.fixed_latency_per_collective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "spec_version": 1,
        "name": "small",
        "local_batch": 4,
        "mflops_per_sample": 1.5,
        "bottom_mlp": [[3, 2]],
        "tables": [
            {"id": "a", "rows": 10, "dim": 4, "pooling": 2.5},
            {"id": "b", "rows": 7, "dim": 8, "pooling": 1, "precision": "fp16", "skew": {"zipf": 1.1}}
        ]
    }"#;

    #[test]
    fn parses_small_model() {
        let m = parse_model_spec(SMALL).unwrap();
        assert_eq!(m.tables.len(), 2);
        assert_eq!(m.dense_param_bytes, 32);
        assert_eq!(m.tables[1].precision, Precision::Fp16);
        assert_eq!(m.tables[1].skew, IndexSkew::Zipf { alpha: 1.1 });
    }

    #[test]
    fn zero_dim_is_invalid_value() {
        let text = SMALL.replace(r#""dim": 4"#, r#""dim": 0"#);
        match parse_model_spec(&text) {
            Err(SpecError::InvalidValue { path, .. }) => assert_eq!(path, "$.tables[0].dim"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys_carry_paths() {
        let text = SMALL.replace(r#""pooling": 2.5"#, r#""pooling": 2.5, "colour": 1"#);
        assert_eq!(parse_model_spec(&text), Err(SpecError::UnknownKey("$.tables[0].colour".into())));
        let text = SMALL.replace(r#""local_batch": 4,"#, "");
        assert_eq!(parse_model_spec(&text), Err(SpecError::MissingKey("$.local_batch".into())));
        assert!(matches!(parse_model_spec("{"), Err(SpecError::MalformedDocument(_))));
    }

    #[test]
    fn round_trip_is_identity() {
        let m = parse_model_spec(SMALL).unwrap();
        let again = parse_model_spec(&model_to_json(&m).to_string()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn groups_expand_deterministically() {
        let text = r#"{
            "spec_version": 1, "local_batch": 2, "mflops_per_sample": 0,
            "table_groups": [{"prefix": "g", "count": 3, "rows": {"total_params": 3000}, "dim": 10, "pooling": 2}]
        }"#;
        let m = parse_model_spec(text).unwrap();
        assert_eq!(m.tables.len(), 3);
        assert_eq!(m.tables[2].id, "g2");
        assert_eq!(m.tables[0].num_rows, 100);
        assert_eq!(m.embedding_params(), 3000);
    }

    #[test]
    fn version_is_checked() {
        let text = SMALL.replace(r#""spec_version": 1"#, r#""spec_version": 2"#);
        assert!(matches!(parse_model_spec(&text), Err(SpecError::InvalidValue { .. })));
    }
}

//! JSONL trace files: a header line, then block and sample records.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeTrace;
use crate::error::{Error, Result};
use crate::rewards::{entropy_descent_reward, indicator_reward, r_scc, EntropySequence};
use crate::seq::{TokenId, Vocabulary};
use crate::tasks::{verify, TaskInstance};

pub const TRACE_SCHEMA: &str = "trace-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub sample_id: usize,
    pub k: usize,
    pub start: usize,
    pub size: usize,
    pub t_star: usize,
    pub entropies: Vec<f64>,
    pub tokens: Vec<TokenId>,
    pub contains_indicator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub instance_fingerprint: String,
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// 0 when there is a single block.
    pub r_scc: f64,
    pub r_ent: f64,
    pub r_ind: f64,
    pub r_task: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header { schema: String, config: serde_json::Value, seed: u64 },
    Block(BlockRecord),
    Sample(SampleRecord),
}

/// Per-sample scores of one decoded test instance.
pub fn sample_record(
    sample_id: usize,
    instance: &TaskInstance,
    trace: &DecodeTrace,
    mode: &str,
    k_target: usize,
    vocab: &Vocabulary,
) -> Result<SampleRecord> {
    let h = EntropySequence::new(trace.block_entropies())?;
    let k = h.k();
    let r = if k >= 2 { r_scc(&h)?.r_scc } else { 0.0 };
    let (correct, r_task) = verify(instance, vocab, trace.completion());
    Ok(SampleRecord {
        sample_id,
        instance_fingerprint: instance.fingerprint.clone(),
        mode: mode.to_string(),
        k,
        r_scc: r,
        r_ent: entropy_descent_reward(&h),
        r_ind: indicator_reward(k, k_target),
        r_task,
        correct,
    })
}

pub fn block_records(sample_id: usize, trace: &DecodeTrace) -> Vec<BlockRecord> {
    trace
        .blocks
        .iter()
        .map(|b| BlockRecord {
            sample_id,
            k: b.span.k,
            start: b.span.start,
            size: b.span.size,
            t_star: b.t_star,
            entropies: b.entropies.clone(),
            tokens: b.tokens.clone(),
            contains_indicator: b.span.contains_indicator,
        })
        .collect()
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceFile {
    pub config: serde_json::Value,
    pub seed: u64,
    pub blocks: Vec<BlockRecord>,
    pub samples: Vec<SampleRecord>,
}

pub fn read_trace<R: BufRead>(r: R) -> Result<TraceFile> {
    let mut out = TraceFile::default();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line)? {
            TraceRecord::Header { schema, config, seed } => {
                if schema != TRACE_SCHEMA {
                    return Err(Error::Config(format!("unsupported trace schema {schema:?}")));
                }
                if saw_header {
                    return Err(Error::Config(format!("second header at line {}", i + 1)));
                }
                saw_header = true;
                out.config = config;
                out.seed = seed;
            }
            TraceRecord::Block(b) => out.blocks.push(b),
            TraceRecord::Sample(s) => out.samples.push(s),
        }
    }
    if !saw_header {
        return Err(Error::Config("trace has no header".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let recs = vec![
            TraceRecord::Header { schema: TRACE_SCHEMA.into(), config: serde_json::json!({"a": 1}), seed: 3 },
            TraceRecord::Block(BlockRecord {
                sample_id: 0,
                k: 1,
                start: 1,
                size: 2,
                t_star: 2,
                entropies: vec![0.1, 0.30000000000000004],
                tokens: vec![4, 3],
                contains_indicator: true,
            }),
            TraceRecord::Sample(SampleRecord {
                sample_id: 0,
                instance_fingerprint: "ab".into(),
                mode: "dynamic".into(),
                k: 1,
                r_scc: 0.0,
                r_ent: 0.0,
                r_ind: 0.5,
                r_task: 1.0,
                correct: true,
            }),
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"record\":\"sample\""));
        assert!(text.contains("\"K\":1"));
        let back = read_trace(buf.as_slice()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.blocks[0].entropies[1], 0.30000000000000004);
        assert_eq!(back.samples.len(), 1);
        assert!(read_trace(&b"{\"record\":\"header\",\"schema\":\"trace-v0\",\"config\":null,\"seed\":1}\n"[..]).is_err());
        assert!(read_trace(&b""[..]).is_err());
    }
}

//! Latency measurements for the four core operations, reported as
//! mean ± standard deviation over N runs.
//!
//! The token here is software and the sync transport is in-process, so the
//! numbers characterize this implementation only — they are not comparable
//! to hardware-token signing or WAN object-store latencies.

use std::sync::Arc;
use std::time::Instant;

use serde_json::json;

use vfa_core::cred_store::{RpId, UnlockedStore};
use vfa_core::ctap::{self, GetAssertionParams, MakeCredentialParams};
use vfa_core::soft_token::{TokenHandle, TokenSession};
use vfa_core::sync::{InProcessSync, SyncCredential, SyncServer, SyncTransport};

use crate::{CliError, Outcome};

pub const MIN_RUNS: u32 = 100;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub operation: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub note: String,
}

#[derive(Debug)]
pub struct BenchReport {
    pub runs: u32,
    pub rows: Vec<BenchRow>,
    pub caveats: Vec<String>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.operation == name)
    }

    pub fn to_outcome(&self) -> Outcome {
        let mut human = format!(
            "{:<28} {:>10} {:>10}\n",
            format!("Operation (n={})", self.runs),
            "Mean (ms)",
            "Std Dev"
        );
        for row in &self.rows {
            human.push_str(&format!(
                "{:<28} {:>10.3} {:>10.3}  {}\n",
                row.operation, row.mean_ms, row.std_ms, row.note
            ));
        }
        for caveat in &self.caveats {
            human.push_str(&format!("note: {caveat}\n"));
        }
        Outcome::new(
            human,
            json!({
                "runs": self.runs,
                "rows": self.rows.iter().map(|r| json!({
                    "operation": r.operation,
                    "mean_ms": r.mean_ms,
                    "std_ms": r.std_ms,
                    "note": r.note,
                })).collect::<Vec<_>>(),
                "caveats": self.caveats,
            }),
        )
    }
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn measure(runs: u32, mut op: impl FnMut()) -> (f64, f64) {
    let mut samples = Vec::with_capacity(runs as usize);
    for _ in 0..runs {
        let start = Instant::now();
        op();
        samples.push(start.elapsed().as_secs_f64() * 1_000.0);
    }
    stats(&samples)
}

/// Measure token signing, the two CTAP operations, and a sync download.
/// Works on in-memory copies; the caller's store file is untouched.
pub fn run_bench(
    token: &TokenHandle,
    session: &TokenSession,
    unlocked: UnlockedStore,
    runs: u32,
) -> Result<BenchReport, CliError> {
    if runs < MIN_RUNS {
        return Err(CliError::Usage(format!("bench needs at least {MIN_RUNS} runs")));
    }

    let mut rows = Vec::new();

    let digest = [0x42u8; 32];
    let (mean, std) = measure(runs, || {
        token.sign_deterministic(session, &digest).expect("token sign");
    });
    rows.push(BenchRow {
        operation: "token sign (deterministic)".into(),
        mean_ms: mean,
        std_ms: std,
        note: "software token — not comparable to a hardware token's latency".into(),
    });

    let mut store = unlocked;
    let mut i = 0u64;
    let (mean, std) = measure(runs, || {
        i += 1;
        let params = MakeCredentialParams {
            client_data_hash: [1; 32],
            rp_id: RpId::new("bench.example").unwrap(),
            user_handle: b"bench".to_vec(),
            user_name: "bench".into(),
            require_uv: true,
            exclude_list: vec![],
        };
        ctap::make_credential(&mut store, &params, i).expect("make credential");
    });
    rows.push(BenchRow {
        operation: "make_credential".into(),
        mean_ms: mean,
        std_ms: std,
        note: "P-256 keygen + seal + self-attestation".into(),
    });

    let (mean, std) = measure(runs, || {
        let params = GetAssertionParams {
            client_data_hash: [1; 32],
            rp_id: RpId::new("bench.example").unwrap(),
            allow_list: None,
        };
        ctap::get_assertion(&mut store, &params).expect("get assertion");
    });
    rows.push(BenchRow {
        operation: "get_assertion".into(),
        mean_ms: mean,
        std_ms: std,
        note: "counter re-seal + one ES256 signature".into(),
    });

    let server = Arc::new(SyncServer::new());
    let cred = SyncCredential::random("bench");
    server.register_user(&cred);
    let transport = InProcessSync { server, cred };
    let bytes = vfa_core::cred_store::store_to_bytes(store.encrypted());
    transport.push(&bytes, 0).map_err(CliError::from)?;
    let (mean, std) = measure(runs, || {
        let (bytes, _) = transport.pull().expect("pull");
        vfa_core::cred_store::store_from_bytes(&bytes).expect("parse");
    });
    rows.push(BenchRow {
        operation: "sync pull (download)".into(),
        mean_ms: mean,
        std_ms: std,
        note: "in-process transport — no WAN or object-store latency".into(),
    });

    Ok(BenchReport {
        runs,
        rows,
        caveats: vec![
            "all numbers are from this software implementation on local hardware".into(),
            "hardware-token signing and cloud WAN download latencies are not reproduced here"
                .into(),
        ],
    })
}

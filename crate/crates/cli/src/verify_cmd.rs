//! Standalone offline receipt verification: the receipt, a trust store,
//! and optional revocation state all arrive as files, the verdict is an
//! exit code, and failure reasons print one per line in check order.

use std::io::Write;
use std::path::Path;

use provenir_core::keys::TrustStore;
use provenir_core::krn::{KrnStream, MirrorState};
use provenir_core::receipt::{verify_receipt, AnswerReceipt, VerifyContext};

use crate::args::VerifyArgs;
use crate::io;
use crate::{CliError, EXIT_FAIL, EXIT_OK};

fn load_krn(path: &Path) -> Result<KrnStream, CliError> {
    let text = io::read_string(path)?;
    KrnStream::from_jsonl(&text)
        .map_err(|e| CliError::Config(format!("cannot parse KRN stream {}: {e}", path.display())))
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let receipt: AnswerReceipt = io::read_json(&args.receipt)?;
    let trust: TrustStore = io::read_json(&args.trust_store)?;
    let local = args.local_krn.as_deref().map(load_krn).transpose()?;
    let substrate = args.substrate_krn.as_deref().map(load_krn).transpose()?;
    let mirror: MirrorState = io::read_json(&args.mirror)?;

    let expected = match (&args.expected_route_version, &args.expected_contract_version) {
        (Some(route), Some(contract)) => Some((route.as_str(), contract.as_str())),
        _ => None,
    };
    let ctx = VerifyContext {
        trust: &trust,
        local_krn: local.as_ref(),
        substrate_krn: substrate.as_ref(),
        mirror: &mirror,
        expected_policy: expected,
        now_ms: args.now_ms.unwrap_or(receipt.signed_at_ms),
    };
    let report = verify_receipt(&receipt, &ctx);
    if report.pass {
        writeln!(out, "PASS").ok();
        Ok(EXIT_OK)
    } else {
        for reason in &report.reasons {
            writeln!(out, "{reason}").ok();
        }
        Ok(EXIT_FAIL)
    }
}

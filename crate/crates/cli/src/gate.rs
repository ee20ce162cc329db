//! Gate runs over hash-pinned fixtures.
//!
//! The runner replays the fixture's clock script against the real
//! decision cascade: every request event sets the scripted clock,
//! passes admission, and runs the full gate with table-driven verifier
//! verdicts and proofs drawn from a manifest built over the fixture
//! fragments. Each decision leaves one trace line and one signed
//! receipt — full receipts for full promotions, lite receipts for lite
//! promotions and diagnostic abstentions. All randomness comes from the
//! fixture seeds, so a re-run is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use provenir_core::canon::canonical_bytes;
use provenir_core::clock::{Clock, ScriptedClock};
use provenir_core::engine::{
    decide, incident_mode, rate_limit, Admission, EngineDeps, IncidentAction, ProofRecord,
    ProofSource, Request, ReturnState, RouteState, TableVerifier,
};
use provenir_core::hash::{hash_domain, sha256, Digest};
use provenir_core::keys::TrustStore;
use provenir_core::krn::{KrnStream, MirrorState};
use provenir_core::manifest::{build_manifest, DocumentEntry, License, ProofEnvelope, ShardId, ShardManifest};
use provenir_core::mses::Tier;
use provenir_core::policy::Fragment;
use provenir_core::receipt::{
    build_receipt, default_pii_patterns, redact, sign_receipt, PiiFinding, ReceiptMode,
    RedactionOutcome, SigningContext, SigningScheme,
};

use crate::fixture::{load_fixture, write_golden_fixture, ClockAction, LoadedFixture, VerdictTables};
use crate::io;
use crate::{CliError, EXIT_ABSTAIN_DOMINANT, EXIT_OK};

// ---------------------------------------------------------------------------
// Run artifacts
// ---------------------------------------------------------------------------

/// Machine-readable run summary written next to the traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub requests: u64,
    pub admitted: u64,
    pub denied: u64,
    pub return_states: BTreeMap<String, u64>,
    pub abstain_reasons: BTreeMap<String, u64>,
    /// Receipts escalated to ABSTAIN(privacy) by the redaction pass.
    pub privacy_escalations: u64,
    pub incident_tickets: Vec<String>,
}

/// One redaction-log line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionLine {
    pub request_id: String,
    pub finding: PiiFinding,
}

// ---------------------------------------------------------------------------
// Fixture-backed dependencies
// ---------------------------------------------------------------------------

fn verifier_for(tier: Tier, tables: &VerdictTables) -> TableVerifier {
    let mut verifier = TableVerifier::new(tier);
    if let Some(default) = tables.defaults.get(&tier) {
        verifier = verifier.with_default(default.clone());
    }
    for row in tables.rows.iter().filter(|r| r.tier == tier) {
        verifier = verifier.with(&row.fragment_id, row.verdict.clone());
    }
    verifier
}

fn fixture_manifest(fx: &LoadedFixture) -> Result<ShardManifest, CliError> {
    let mut entries: BTreeMap<String, DocumentEntry> = BTreeMap::new();
    for fragment in fx.fragments.values() {
        entries.entry(fragment.doc_id.clone()).or_insert_with(|| DocumentEntry {
            doc_id: fragment.doc_id.clone(),
            version_hash: fragment.content_hash,
            license: License {
                terms_id: fragment.license.terms_id.clone(),
                ttl_expiry_ms: fragment.license.ttl_expiry_ms,
            },
            anchors: fragment.selectors.clone(),
            trust_tier: fragment.trust_tier,
            issuer: fragment.issuer.clone(),
            author: fragment.author.clone(),
        });
    }
    let shard_id = ShardId {
        issuer: "fixture-pool".to_string(),
        corpus: fx.bundle.route_id.clone(),
        jurisdiction: "EU".to_string(),
        window_start_ms: fx.clock.start_ms.saturating_sub(86_400_000),
        window_end_ms: fx.clock.start_ms + 31_536_000_000,
    };
    build_manifest(entries.into_values().collect(), shard_id, fx.clock.start_ms)
        .map_err(|e| CliError::Config(format!("cannot build fixture manifest: {e}")))
}

/// Proof source over the fixture manifest; per-request injected delay
/// moves the scripted clock to model slow provers.
struct FixtureProofs<'a> {
    manifest: &'a ShardManifest,
    clock: &'a ScriptedClock,
    delay_ms: Option<u64>,
}

impl ProofSource for FixtureProofs<'_> {
    fn prove(&self, doc_ids: &[String]) -> Result<ProofRecord, String> {
        let started = self.clock.now_ms();
        let refs: Vec<&str> = doc_ids.iter().map(String::as_str).collect();
        let proof = self.manifest.prove_multi(&refs).map_err(|e| e.to_string())?;
        let envelope = ProofEnvelope::Multi(proof);
        if let Some(delay) = self.delay_ms {
            self.clock.advance(delay);
        }
        let bytes = envelope.to_bytes();
        Ok(ProofRecord {
            doc_ids: doc_ids.to_vec(),
            root_hex: self.manifest.root.to_hex(),
            proof_hex: hex::encode(&bytes),
            size_bytes: bytes.len(),
            elapsed_ms: self.clock.now_ms() - started,
            timed_out: false,
        })
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_gate_init(dir: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    let path = write_golden_fixture(dir)?;
    writeln!(out, "golden fixture written to {}", path.display()).ok();
    Ok(EXIT_OK)
}

pub fn cmd_gate_run(fixture_path: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<i32, CliError> {
    // Hash verification happens inside the loader; nothing may be
    // written before it passes.
    let fx = load_fixture(fixture_path)?;

    let clock = ScriptedClock::starting_at(fx.clock.start_ms);
    let mut route = RouteState::new(&fx.bundle.route_id, &fx.policy, fx.clock.start_ms);
    let cheap = verifier_for(Tier::Cheap, &fx.verdicts);
    let small = verifier_for(Tier::Small, &fx.verdicts);
    let heavy = verifier_for(Tier::Heavy, &fx.verdicts);
    let manifest = fixture_manifest(&fx)?;
    let patterns = default_pii_patterns();

    // The promotion digest commits to the pinned policy and the evidence
    // manifest the run serves from.
    let mut artifact_hashes = vec![sha256(&fx.policy_bytes), manifest.root];
    artifact_hashes.sort_by_key(Digest::to_hex);
    let hash_slices: Vec<&[u8]> = artifact_hashes.iter().map(|d| d.as_bytes().as_slice()).collect();
    let signing = SigningContext {
        kid: fx.bundle.seeds.signing_kid.clone(),
        alg: fx.bundle.seeds.signing_alg,
        scheme: SigningScheme::Single,
        promotion_digest: hash_domain("promotion:set:v1", &hash_slices),
        promotion_approvals: Vec::new(),
    };

    let mut summary = GateSummary::default();
    let mut trace_lines: Vec<Vec<u8>> = Vec::new();
    let mut receipts: Vec<(String, Vec<u8>)> = Vec::new();
    let mut redactions: Vec<RedactionLine> = Vec::new();

    for event in &fx.clock.events {
        clock.set(event.at_ms);
        match &event.action {
            ClockAction::OpenIncident { ticket_id, duration_ms } => {
                incident_mode(
                    &mut route,
                    IncidentAction::Open { ticket_id: ticket_id.clone(), duration_ms: *duration_ms },
                    &clock,
                )
                .map_err(|e| CliError::Config(format!("clock script incident error: {e}")))?;
                summary.incident_tickets.push(ticket_id.clone());
            }
            ClockAction::CloseIncident => {
                incident_mode(&mut route, IncidentAction::Close, &clock)
                    .map_err(|e| CliError::Config(format!("clock script incident error: {e}")))?;
            }
            ClockAction::Request { request_id } => {
                summary.requests += 1;
                let spec = &fx.requests[request_id];
                if let Admission::Deny { .. } = rate_limit(&mut route, &spec.org_id, clock.now_ms()) {
                    summary.denied += 1;
                    continue;
                }
                summary.admitted += 1;

                let fragments: Vec<Fragment> =
                    spec.fragment_ids.iter().map(|id| fx.fragments[id].clone()).collect();
                let request = Request {
                    request_id: spec.request_id.clone(),
                    claim: spec.claim.clone(),
                    fragments,
                    session_class: spec.session_class.clone(),
                    high_stakes: spec.high_stakes,
                    org_id: spec.org_id.clone(),
                    route_id: fx.bundle.route_id.clone(),
                    arrival_ms: event.at_ms,
                    adversarial_score: spec.adversarial_score,
                    retrieval_anomaly: spec.retrieval_anomaly,
                };
                let proofs =
                    FixtureProofs { manifest: &manifest, clock: &clock, delay_ms: spec.proof_delay_ms };
                let deps = EngineDeps {
                    cheap: &cheap,
                    small: &small,
                    heavy: &heavy,
                    proofs: &proofs,
                    clock: &clock,
                    citations: &fx.citations,
                    route_seed: fx.bundle.seeds.route_seed.clone(),
                    session_seed: fx.bundle.seeds.session_seed.clone(),
                    dependence: None,
                    retrieval_script: None,
                };
                let decision = decide(&request, &fx.policy, &mut route, &deps);

                *summary
                    .return_states
                    .entry(decision.return_state.to_string())
                    .or_insert(0) += 1;
                if let Some(reason) = &decision.trace.abstain_reason {
                    *summary.abstain_reasons.entry(reason.clone()).or_insert(0) += 1;
                }

                let (answer, mode) = match decision.return_state {
                    ReturnState::PromoteFull => (Some(spec.claim.as_str()), ReceiptMode::Full),
                    ReturnState::PromoteLite => (Some(spec.claim.as_str()), ReceiptMode::Lite),
                    ReturnState::Abstain => (None, ReceiptMode::Lite),
                };
                let receipt = build_receipt(
                    answer,
                    &decision.trace,
                    &decision.evidence,
                    &fx.policy,
                    &signing,
                    mode,
                )
                .map_err(|e| {
                    CliError::Failure(format!("receipt build failed for `{request_id}`: {e}"))
                })?;
                let (receipt, findings) = match redact(receipt, &fx.policy, &patterns) {
                    RedactionOutcome::Disclosed { receipt, findings } => (receipt, findings),
                    RedactionOutcome::AbstainPrivacy { receipt, findings } => {
                        summary.privacy_escalations += 1;
                        (receipt, findings)
                    }
                };
                redactions.extend(findings.into_iter().map(|finding| RedactionLine {
                    request_id: request_id.clone(),
                    finding,
                }));
                let signed = sign_receipt(receipt, &fx.signing_key, None, clock.now_ms())
                    .map_err(|e| {
                        CliError::Failure(format!("signing failed for `{request_id}`: {e}"))
                    })?;

                trace_lines.push(canonical_line(&decision.trace)?);
                receipts.push((request_id.clone(), canonical_line(&signed)?));
                writeln!(
                    out,
                    "{request_id} {}{}",
                    decision.return_state,
                    decision
                        .trace
                        .abstain_reason
                        .as_deref()
                        .map(|r| format!(" ({r})"))
                        .unwrap_or_default()
                )
                .ok();
            }
        }
    }

    // --- write artifacts (atomically, after the whole run succeeded).
    let mut traces = Vec::new();
    for line in &trace_lines {
        traces.extend_from_slice(line);
        traces.push(b'\n');
    }
    io::atomic_write(&out_dir.join("traces.jsonl"), &traces)?;
    for (request_id, bytes) in &receipts {
        io::atomic_write(&out_dir.join("receipts").join(format!("{request_id}.json")), bytes)?;
    }
    let mut trust = TrustStore::new();
    trust
        .add(fx.signing_key.export_public(None, None))
        .map_err(|e| CliError::Failure(format!("trust-store export failed: {e}")))?;
    io::write_canonical_json(&out_dir.join("trust_store.json"), &trust)?;
    let mirror = MirrorState { last_sync_ms: clock.now_ms(), cursor: 0 };
    io::write_canonical_json(&out_dir.join("mirror.json"), &mirror)?;
    // Empty dual-channel revocation state: the run issued no revocations, and
    // offline verification needs both channels present to return VALID.
    let empty_krn = KrnStream::new()
        .to_jsonl()
        .map_err(|e| CliError::Failure(format!("cannot serialize KRN stream: {e}")))?;
    io::atomic_write(&out_dir.join("krn_local.jsonl"), empty_krn.as_bytes())?;
    io::atomic_write(&out_dir.join("krn_substrate.jsonl"), empty_krn.as_bytes())?;
    io::write_canonical_json(&out_dir.join("summary.json"), &summary)?;
    if !redactions.is_empty() {
        let mut log = Vec::new();
        for line in &redactions {
            log.extend_from_slice(&canonical_line(line)?);
            log.push(b'\n');
        }
        io::atomic_write(&out_dir.join("redactions.jsonl"), &log)?;
    }

    let abstains = summary.return_states.get("ABSTAIN").copied().unwrap_or(0);
    writeln!(
        out,
        "{} requests: {} admitted, {} denied, {} abstained",
        summary.requests, summary.admitted, summary.denied, abstains
    )
    .ok();
    Ok(if abstains * 2 > summary.admitted { EXIT_ABSTAIN_DOMINANT } else { EXIT_OK })
}

fn canonical_line<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    canonical_bytes(value).map_err(|e| CliError::Failure(format!("cannot canonicalize output: {e}")))
}

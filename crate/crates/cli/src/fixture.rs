//! Hash-pinned gate fixtures.
//!
//! A fixture bundle names six files — policy snapshot, fragments,
//! citation edges, requests, verifier verdict tables, and a clock script
//! of ordered timestamped events — each pinned by its SHA-256. Loading
//! refuses to proceed on any digest mismatch (there is deliberately no
//! force flag): a fixture is a frozen snapshot, and editing a referenced
//! file without re-pinning invalidates the run. The built-in golden
//! fixture covers the full gate surface: clean promotions, the failing
//! independence triple, a degraded-proof lite promotion, risk-bound and
//! support-count abstentions, PII masking, and an incident window.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use provenir_core::engine::TierVerdict;
use provenir_core::graph::CitationIndex;
use provenir_core::hash::{hash_to_unit, sha256};
use provenir_core::keys::{KeyHandle, SigAlg};
use provenir_core::mses::Tier;
use provenir_core::policy::{CitationRef, Fragment, License, PiiMode, PolicySnapshot};

use crate::io;
use crate::CliError;

// ---------------------------------------------------------------------------
// Bundle schema
// ---------------------------------------------------------------------------

/// A referenced file pinned by content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinnedFile {
    /// Path relative to the bundle file.
    pub path: String,
    /// Lowercase hex SHA-256 of the file bytes.
    pub sha256: String,
}

/// Deterministic seeds and the signing identity for a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSeeds {
    pub route_seed: String,
    pub session_seed: String,
    pub signing_kid: String,
    pub signing_alg: SigAlg,
    /// 32-byte signing seed as 64 hex chars.
    pub signing_seed_hex: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureBundle {
    pub route_id: String,
    pub policy: PinnedFile,
    pub fragments: PinnedFile,
    pub citations: PinnedFile,
    pub requests: PinnedFile,
    pub verdicts: PinnedFile,
    pub clock: PinnedFile,
    pub seeds: FixtureSeeds,
}

/// One scripted request, minus its arrival time (the clock script owns
/// all timestamps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub request_id: String,
    pub claim: String,
    /// Fragment ids resolved against the fragments file.
    pub fragment_ids: Vec<String>,
    pub session_class: String,
    pub high_stakes: bool,
    pub org_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adversarial_score: Option<f64>,
    #[serde(default)]
    pub retrieval_anomaly: bool,
    /// Injected proof latency, for degrade-path scripting.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub proof_delay_ms: Option<u64>,
}

/// Verdict tables keyed by (fragment id, tier), with per-tier defaults
/// for unscripted fragments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictTables {
    pub defaults: BTreeMap<Tier, TierVerdict>,
    pub rows: Vec<VerdictRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub fragment_id: String,
    pub tier: Tier,
    pub verdict: TierVerdict,
}

/// Ordered timestamped events driving the scripted clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockScript {
    pub start_ms: u64,
    /// Always "simulated" — latency figures derived from this script are
    /// not hardware claims.
    pub label: String,
    pub events: Vec<ClockEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: ClockAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClockAction {
    Request { request_id: String },
    OpenIncident { ticket_id: String, duration_ms: u64 },
    CloseIncident,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// A fully parsed, hash-verified fixture.
pub struct LoadedFixture {
    pub bundle: FixtureBundle,
    pub policy: PolicySnapshot,
    pub fragments: BTreeMap<String, Fragment>,
    pub citations: CitationIndex,
    pub requests: BTreeMap<String, RequestSpec>,
    pub verdicts: VerdictTables,
    pub clock: ClockScript,
    pub signing_key: KeyHandle,
    /// Raw bytes of the pinned policy file (promotion digest input).
    pub policy_bytes: Vec<u8>,
}

fn pinned_bytes(dir: &Path, pin: &PinnedFile) -> Result<Vec<u8>, CliError> {
    let path = dir.join(&pin.path);
    let bytes = io::read_bytes(&path)?;
    let actual = io::sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&pin.sha256) {
        return Err(CliError::Config(format!(
            "fixture hash mismatch for {}: declared {}, actual {actual}",
            pin.path, pin.sha256
        )));
    }
    Ok(bytes)
}

fn pinned_json<T: serde::de::DeserializeOwned>(
    dir: &Path,
    pin: &PinnedFile,
) -> Result<T, CliError> {
    let bytes = pinned_bytes(dir, pin)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", pin.path)))
}

/// Load and validate a fixture bundle. Every pinned digest is checked
/// before anything else happens; a mismatch is a config error and the
/// caller must not have produced any output yet.
pub fn load_fixture(path: &Path) -> Result<LoadedFixture, CliError> {
    let bundle: FixtureBundle = io::read_json(path)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));

    let policy_bytes = pinned_bytes(dir, &bundle.policy)?;
    let policy: PolicySnapshot = serde_json::from_slice(&policy_bytes)
        .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", bundle.policy.path)))?;
    let fragment_list: Vec<Fragment> = pinned_json(dir, &bundle.fragments)?;
    let citations: CitationIndex = pinned_json(dir, &bundle.citations)?;
    let request_list: Vec<RequestSpec> = pinned_json(dir, &bundle.requests)?;
    let verdicts: VerdictTables = pinned_json(dir, &bundle.verdicts)?;
    let clock: ClockScript = pinned_json(dir, &bundle.clock)?;

    let mut fragments = BTreeMap::new();
    for fragment in fragment_list {
        let id = fragment.fragment_id.clone();
        if fragments.insert(id.clone(), fragment).is_some() {
            return Err(CliError::Config(format!("duplicate fragment id `{id}` in fixture")));
        }
    }
    let mut requests = BTreeMap::new();
    for request in request_list {
        for fid in &request.fragment_ids {
            if !fragments.contains_key(fid) {
                return Err(CliError::Config(format!(
                    "request `{}` references unknown fragment `{fid}`",
                    request.request_id
                )));
            }
        }
        let id = request.request_id.clone();
        if requests.insert(id.clone(), request).is_some() {
            return Err(CliError::Config(format!("duplicate request id `{id}` in fixture")));
        }
    }
    if clock.events.windows(2).any(|w| w[0].at_ms > w[1].at_ms) {
        return Err(CliError::Config("clock events are not in timestamp order".to_string()));
    }
    for event in &clock.events {
        if event.at_ms < clock.start_ms {
            return Err(CliError::Config(format!(
                "clock event at {} precedes start {}",
                event.at_ms, clock.start_ms
            )));
        }
        if let ClockAction::Request { request_id } = &event.action {
            if !requests.contains_key(request_id) {
                return Err(CliError::Config(format!(
                    "clock event references unknown request `{request_id}`"
                )));
            }
        }
    }

    let seed_bytes = hex::decode(&bundle.seeds.signing_seed_hex)
        .map_err(|e| CliError::Config(format!("signing seed is not hex: {e}")))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| CliError::Config("signing seed must be 32 bytes".to_string()))?;
    let signing_key = KeyHandle::from_seed(&bundle.seeds.signing_kid, bundle.seeds.signing_alg, &seed)
        .map_err(|e| CliError::Config(format!("cannot derive signing key: {e}")))?;

    Ok(LoadedFixture {
        bundle,
        policy,
        fragments,
        citations,
        requests,
        verdicts,
        clock,
        signing_key,
        policy_bytes,
    })
}

// ---------------------------------------------------------------------------
// Golden fixture
// ---------------------------------------------------------------------------

const START_MS: u64 = 1_705_000_000_000;
const YEAR_MS: u64 = 365 * 24 * 60 * 60 * 1000;
const ROUTE_SEED: &str = "route-seed-7";
const SESSION_SEED: &str = "session-seed-11";

/// Pick a request id whose deterministic sampling draw stays below the
/// audit rate, so golden-run heavy usage is fully scripted.
fn unsampled(base: &str, rate: f64) -> String {
    std::iter::once(base.to_string())
        .chain((0..).map(|i| format!("{base}-{i}")))
        .find(|id| {
            hash_to_unit("heavy-sampling:v1", &[ROUTE_SEED.as_bytes(), id.as_bytes()]) >= rate
        })
        .expect("an unsampled suffix exists")
}

fn golden_fragment(id: &str, doc: &str, issuer: &str, body: &str) -> Fragment {
    Fragment {
        fragment_id: id.to_string(),
        doc_id: doc.to_string(),
        shard_id: "shard-golden".to_string(),
        issuer: issuer.to_string(),
        author: format!("author-{issuer}"),
        jurisdiction: Some("EU".to_string()),
        effective_start: None,
        effective_end: None,
        publication_date: chrono::NaiveDate::from_ymd_opt(2023, 3, 1),
        license: License { terms_id: "CC-BY-4.0".to_string(), ttl_expiry_ms: START_MS + YEAR_MS },
        trust_tier: 3,
        language: "en".to_string(),
        content_hash: sha256(id.as_bytes()),
        selectors: vec![format!("p:{id}")],
        upstream_citations: Vec::new(),
        body: Some(body.to_string()),
    }
}

fn support(p: f64, confidence: f64, elapsed_ms: u64) -> TierVerdict {
    TierVerdict {
        support: true,
        contradict: false,
        p_support: p,
        p_contradict: 0.9,
        calibrated_confidence: confidence,
        elapsed_ms,
    }
}

fn neutral(elapsed_ms: u64) -> TierVerdict {
    TierVerdict {
        support: false,
        contradict: false,
        p_support: 0.5,
        p_contradict: 0.5,
        calibrated_confidence: 0.30,
        elapsed_ms,
    }
}

/// Write the golden fixture into `dir` and return the bundle path.
///
/// The request mix is promote-dominant by design: five full promotions
/// (three inside an incident window), one degraded-proof lite promotion,
/// and three abstentions (independence, risk bounds, support count).
pub fn write_golden_fixture(dir: &Path) -> Result<PathBuf, CliError> {
    // --- policy: defaults with PII masking instead of abstention.
    let policy = PolicySnapshot { pii_mode: PiiMode::Mask, ..PolicySnapshot::default() }
        .seal()
        .map_err(|e| CliError::Failure(format!("cannot seal golden policy: {e}")))?;

    // --- fragments: six pools of three.
    let pool = |prefix: &str, issuers: [&str; 3], bodies: [&str; 3]| -> Vec<Fragment> {
        (0..3)
            .map(|i| {
                golden_fragment(
                    &format!("{prefix}{}", i + 1),
                    &format!("doc-{prefix}{}", i + 1),
                    issuers[i],
                    bodies[i],
                )
            })
            .collect()
    };
    let plain = ["primary source text", "corroborating filing text", "background note text"];
    let mut fragments = Vec::new();
    fragments.extend(pool("f", ["issuer-a", "issuer-b", "issuer-c"], plain));
    fragments.extend(pool("g", ["issuer-p", "issuer-q", "issuer-r"], plain));
    fragments.extend(pool("h", ["issuer-a", "issuer-b", "issuer-c"], plain));
    fragments.extend(pool("w", ["issuer-a", "issuer-b", "issuer-c"], plain));
    fragments.extend(pool("s", ["issuer-a", "issuer-b", "issuer-c"], plain));
    fragments.extend(pool(
        "e",
        ["issuer-a", "issuer-b", "issuer-c"],
        ["ops contact is billing@example.com for filings", plain[1], plain[2]],
    ));

    // --- citations: the worked-example pair shares one upstream source.
    let mut citations = CitationIndex::new();
    citations.insert("doc-g2".to_string(), vec![CitationRef::Doc("doc-root".to_string())]);
    citations.insert("doc-g3".to_string(), vec![CitationRef::Doc("doc-root".to_string())]);

    // --- verdict tables.
    let mut defaults = BTreeMap::new();
    defaults.insert(Tier::Cheap, neutral(5));
    defaults.insert(Tier::Small, neutral(20));
    defaults.insert(Tier::Heavy, support(0.0005, 0.95, 40));
    let mut rows = Vec::new();
    let mut row = |id: &str, tier: Tier, verdict: TierVerdict| {
        rows.push(VerdictRow { fragment_id: id.to_string(), tier, verdict });
    };
    for prefix in ["f", "h", "e"] {
        row(&format!("{prefix}1"), Tier::Cheap, support(0.002, 0.80, 5));
        row(&format!("{prefix}2"), Tier::Cheap, support(0.003, 0.80, 5));
        row(&format!("{prefix}1"), Tier::Small, support(0.001, 0.85, 20));
        row(&format!("{prefix}2"), Tier::Small, support(0.004, 0.87, 20));
    }
    for (i, id) in ["g1", "g2", "g3"].into_iter().enumerate() {
        row(id, Tier::Cheap, support(0.002 + i as f64 * 0.001, 0.80, 5));
        row(id, Tier::Small, support(0.001 + i as f64 * 0.001, 0.85 + i as f64 * 0.01, 20));
    }
    row("w1", Tier::Cheap, support(0.02, 0.60, 5));
    row("w2", Tier::Cheap, support(0.03, 0.60, 5));
    row("w1", Tier::Small, support(0.05, 0.60, 20));
    row("w2", Tier::Small, support(0.08, 0.65, 20));
    row("s1", Tier::Cheap, support(0.002, 0.80, 5));
    row("s1", Tier::Small, support(0.001, 0.85, 20));
    let verdicts = VerdictTables { defaults, rows };

    // --- requests, with sampling-quiet ids.
    let rate = policy.sample_rate;
    let ids: BTreeMap<&str, String> = [
        ("alpha", unsampled("req-alpha", rate)),
        ("bravo", unsampled("req-bravo", rate)),
        ("charlie", unsampled("req-charlie", rate)),
        ("delta", unsampled("req-delta", rate)),
        ("echo", unsampled("req-echo", rate)),
        ("foxtrot", unsampled("req-foxtrot", rate)),
        ("golf", unsampled("req-golf", rate)),
        ("hotel", unsampled("req-hotel", rate)),
        ("india", unsampled("req-india", rate)),
    ]
    .into_iter()
    .collect();
    let request = |key: &str, claim: &str, frags: [&str; 3], delay: Option<u64>| RequestSpec {
        request_id: ids[key].clone(),
        claim: claim.to_string(),
        fragment_ids: frags.iter().map(|s| s.to_string()).collect(),
        session_class: "standard".to_string(),
        high_stakes: false,
        org_id: "org-main".to_string(),
        adversarial_score: None,
        retrieval_anomaly: false,
        proof_delay_ms: delay,
    };
    let requests = vec![
        request("alpha", "the filing deadline moved to march", ["f1", "f2", "f3"], None),
        request("bravo", "the restated total is forty-two", ["g1", "g2", "g3"], None),
        request("charlie", "the carrier accepts split shipments", ["h1", "h2", "h3"], Some(400)),
        request("delta", "the tariff applies to re-imports", ["w1", "w2", "w3"], None),
        request("echo", "the annex was ratified in may", ["s1", "s2", "s3"], None),
        request("foxtrot", "the billing address is unchanged", ["e1", "e2", "e3"], None),
        request("golf", "the filing deadline moved to march", ["f1", "f2", "f3"], None),
        request("hotel", "the filing deadline moved to march", ["f1", "f2", "f3"], None),
        request("india", "the filing deadline moved to march", ["f1", "f2", "f3"], None),
    ];

    // --- clock script: one request every 10 s, an incident window over
    // the last three.
    let mut events = Vec::new();
    for (i, key) in ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"]
        .into_iter()
        .enumerate()
    {
        events.push(ClockEvent {
            at_ms: START_MS + (i as u64 + 1) * 10_000,
            action: ClockAction::Request { request_id: ids[key].clone() },
        });
    }
    events.push(ClockEvent {
        at_ms: START_MS + 70_000,
        action: ClockAction::OpenIncident {
            ticket_id: "INC-2024-07".to_string(),
            duration_ms: 25_000,
        },
    });
    for (key, offset) in [("golf", 71_000u64), ("hotel", 80_000), ("india", 90_000)] {
        events.push(ClockEvent {
            at_ms: START_MS + offset,
            action: ClockAction::Request { request_id: ids[key].clone() },
        });
    }
    let clock = ClockScript { start_ms: START_MS, label: "simulated".to_string(), events };

    // --- write the six files, then pin them.
    let write_pinned = |name: &str, bytes: Vec<u8>| -> Result<PinnedFile, CliError> {
        io::atomic_write(&dir.join(name), &bytes)?;
        Ok(PinnedFile { path: name.to_string(), sha256: io::sha256_hex(&bytes) })
    };
    let policy_pin = write_pinned("policy.json", canon_bytes(&policy)?)?;
    let fragments_pin = write_pinned("fragments.json", canon_bytes(&fragments)?)?;
    let citations_pin = write_pinned("citations.json", canon_bytes(&citations)?)?;
    let requests_pin = write_pinned("requests.json", canon_bytes(&requests)?)?;
    let verdicts_pin = write_pinned("verdicts.json", canon_bytes(&verdicts)?)?;
    let clock_pin = write_pinned("clock.json", canon_bytes(&clock)?)?;

    let bundle = FixtureBundle {
        route_id: "route-alpha".to_string(),
        policy: policy_pin,
        fragments: fragments_pin,
        citations: citations_pin,
        requests: requests_pin,
        verdicts: verdicts_pin,
        clock: clock_pin,
        seeds: FixtureSeeds {
            route_seed: ROUTE_SEED.to_string(),
            session_seed: SESSION_SEED.to_string(),
            signing_kid: "golden-signer".to_string(),
            signing_alg: SigAlg::Ed25519,
            signing_seed_hex: hex::encode([7u8; 32]),
        },
    };
    let bundle_path = dir.join("fixture.json");
    io::write_canonical_json(&bundle_path, &bundle)?;
    Ok(bundle_path)
}

fn canon_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    provenir_core::canon::canonical_bytes(value)
        .map_err(|e| CliError::Failure(format!("cannot canonicalize fixture file: {e}")))
}

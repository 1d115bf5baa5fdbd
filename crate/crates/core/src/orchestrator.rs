//! Resumable batch inference. Users are shuffled once, chunked into
//! epochs, and each epoch commits atomically: outputs land under a temp
//! name, get fsynced, renamed, and only then does the checkpoint advance.
//! A crash therefore loses at most the in-flight epoch, and a resumed run
//! reproduces byte-identical outputs for whatever it redoes.
//!
//! Per-user failures never abort an epoch; they divert to a dead-letter
//! file and the run carries on.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::Event;
use crate::prompting::{prefix_registry, RenderedPrompt};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint unreadable: {0}")]
    CheckpointParse(#[from] serde_json::Error),
    #[error("injected failure at epoch {epoch}")]
    InjectedFailure { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub run_id: String,
    pub epoch_size: usize,
    /// Seeded shuffle of the scheduled users, chunked; every epoch except
    /// possibly the last holds exactly `epoch_size` users.
    pub epochs: Vec<Vec<String>>,
}

pub fn plan_run(users: &[String], epoch_size: usize, run_id: &str, seed: u64) -> EpochPlan {
    assert!(epoch_size >= 1, "epoch_size must be positive");
    let mut shuffled = users.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.gen_range(0..=i));
    }
    EpochPlan {
        run_id: run_id.to_owned(),
        epoch_size,
        epochs: shuffled.chunks(epoch_size).map(<[String]>::to_vec).collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCheckpoint {
    pub run_id: String,
    pub completed_epochs: Vec<usize>,
    /// Epoch index to sha256 hex of the committed output file.
    pub output_manifest: BTreeMap<usize, String>,
    /// Data watermark of the last committed epoch; drives incremental
    /// re-runs.
    pub last_success_timestamp: i64,
}

/// Where to simulate a crash, for resumability drills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePoint {
    /// Dies after computing an epoch but before its rename commits, as if
    /// the process was killed mid-write.
    DuringEpoch(usize),
    /// Dies right after an epoch committed, before the next one starts.
    AfterEpoch(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub concurrency: usize,
    /// Recorded as `last_success_timestamp` on every commit. Callers pass
    /// the newest event timestamp the run's inputs cover.
    pub watermark: i64,
    pub inject: Option<FailurePoint>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { concurrency: 4, watermark: 0, inject: None }
    }
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub processed_epochs: Vec<usize>,
    pub skipped_epochs: Vec<usize>,
    pub worker_calls: usize,
    pub dead_letters: usize,
    pub output_files: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OutputRow {
    user_id: String,
    completion: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeadLetterRow {
    user_id: String,
    error: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().expect("file path").to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Write-to-temp, fsync, rename. The destination is either absent or
/// complete, never truncated.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = temp_path(path);
    {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

fn epoch_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch}.jsonl"))
}

fn load_checkpoint(path: &Path) -> Result<Option<EpochCheckpoint>, OrchestratorError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Runs each user through `worker` on a small thread pool; results come
/// back in input order regardless of completion order.
fn process_users(
    users: &[String],
    worker: &(dyn Fn(&str) -> Result<String, String> + Sync),
    concurrency: usize,
) -> Vec<Result<String, String>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<String, String>>>> = Mutex::new(vec![None; users.len()]);
    let workers = concurrency.max(1).min(users.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= users.len() {
                    break;
                }
                let result = worker(&users[idx]);
                slots.lock().expect("worker panicked holding results")[idx] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked holding results")
        .into_iter()
        .map(|slot| slot.expect("every user processed"))
        .collect()
}

/// Executes the plan, skipping epochs the checkpoint already committed
/// (after re-verifying their file digests). Output files are written only
/// by this coordinator; workers hand results back in memory.
pub fn run_epochs(
    plan: &EpochPlan,
    checkpoint_path: &Path,
    out_dir: &Path,
    worker: &(dyn Fn(&str) -> Result<String, String> + Sync),
    config: &RunConfig,
) -> Result<RunSummary, OrchestratorError> {
    fs::create_dir_all(out_dir)?;
    let mut checkpoint = load_checkpoint(checkpoint_path)?
        .filter(|c| c.run_id == plan.run_id)
        .unwrap_or_else(|| EpochCheckpoint {
            run_id: plan.run_id.clone(),
            ..EpochCheckpoint::default()
        });

    // Trust the manifest only as far as the bytes on disk agree with it.
    let mut completed: BTreeSet<usize> = checkpoint.completed_epochs.iter().copied().collect();
    completed.retain(|&epoch| {
        checkpoint
            .output_manifest
            .get(&epoch)
            .and_then(|expected| {
                fs::read(epoch_path(out_dir, epoch))
                    .ok()
                    .map(|bytes| sha256_hex(&bytes) == *expected)
            })
            .unwrap_or(false)
    });
    checkpoint.output_manifest.retain(|epoch, _| completed.contains(epoch));

    let mut summary = RunSummary::default();
    for (epoch, users) in plan.epochs.iter().enumerate() {
        let path = epoch_path(out_dir, epoch);
        if completed.contains(&epoch) {
            summary.skipped_epochs.push(epoch);
            summary.output_files.push(path);
            continue;
        }

        let results = process_users(users, worker, config.concurrency);
        summary.worker_calls += users.len();

        let mut lines = String::new();
        let mut dead = Vec::new();
        for (user_id, result) in users.iter().zip(results) {
            match result {
                Ok(completion) => {
                    let row = OutputRow { user_id: user_id.clone(), completion };
                    lines.push_str(&serde_json::to_string(&row).expect("plain struct"));
                    lines.push('\n');
                }
                Err(error) => dead.push(DeadLetterRow { user_id: user_id.clone(), error }),
            }
        }

        if config.inject == Some(FailurePoint::DuringEpoch(epoch)) {
            // Leave only the temp file behind, like a mid-write kill.
            let tmp = temp_path(&path);
            fs::write(&tmp, lines.as_bytes())?;
            return Err(OrchestratorError::InjectedFailure { epoch });
        }

        write_atomic(&path, lines.as_bytes())?;

        completed.insert(epoch);
        checkpoint.completed_epochs = completed.iter().copied().collect();
        checkpoint.output_manifest.insert(epoch, sha256_hex(lines.as_bytes()));
        checkpoint.last_success_timestamp = config.watermark;
        write_atomic(checkpoint_path, serde_json::to_string(&checkpoint)?.as_bytes())?;

        if !dead.is_empty() {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(out_dir.join("dead_letter.jsonl"))?;
            for row in &dead {
                writeln!(file, "{}", serde_json::to_string(row).expect("plain struct"))?;
            }
            file.sync_all()?;
        }
        summary.dead_letters += dead.len();
        summary.processed_epochs.push(epoch);
        summary.output_files.push(path);

        if config.inject == Some(FailurePoint::AfterEpoch(epoch)) {
            return Err(OrchestratorError::InjectedFailure { epoch });
        }
    }
    Ok(summary)
}

/// Users owning at least one event newer than the watermark; the set a
/// follow-up incremental run must re-infer.
pub fn incremental_user_set(
    users: &[String],
    events: &[Event],
    last_success_timestamp: i64,
) -> Vec<String> {
    let fresh: HashSet<&str> = events
        .iter()
        .filter(|e| e.timestamp > last_success_timestamp)
        .map(|e| e.user_id.as_str())
        .collect();
    let mut out: Vec<String> =
        users.iter().filter(|u| fresh.contains(u.as_str())).cloned().collect();
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub total_prompts: usize,
    pub distinct_template_prefixes: usize,
    /// Tokens a prefix cache would not recompute: every prompt after the
    /// first in a prefix group reuses that group's prefix.
    pub estimated_cached_tokens: usize,
    pub estimated_total_tokens: usize,
}

pub fn cache_accounting(prompts: &[RenderedPrompt]) -> CacheStats {
    let prefix_cost: BTreeMap<u64, usize> = prefix_registry().into_iter().collect();
    let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
    let mut total_tokens = 0usize;
    for prompt in prompts {
        *groups.entry(prompt.template_prefix_hash).or_insert(0) += 1;
        total_tokens += prompt.token_estimate;
    }
    let cached = groups
        .iter()
        .map(|(hash, count)| (count - 1) * prefix_cost.get(hash).copied().unwrap_or(0))
        .sum();
    CacheStats {
        total_prompts: prompts.len(),
        distinct_template_prefixes: groups.len(),
        estimated_cached_tokens: cached,
        estimated_total_tokens: total_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EventKind, UserProfile};

    fn users(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("user{i:03}")).collect()
    }

    fn echo_worker(user: &str) -> Result<String, String> {
        Ok(format!("completion for {user}"))
    }

    fn read_epochs(dir: &Path, n: usize) -> Vec<Vec<u8>> {
        (0..n).map(|i| fs::read(epoch_path(dir, i)).unwrap()).collect()
    }

    #[test]
    fn plan_sizes_are_exact() {
        let plan = plan_run(&users(25), 10, "r", 1);
        let sizes: Vec<usize> = plan.epochs.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        let plan_even = plan_run(&users(20), 10, "r", 1);
        let sizes: Vec<usize> = plan_even.epochs.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 10]);
    }

    #[test]
    fn plan_is_a_seeded_permutation() {
        let input = users(50);
        let plan = plan_run(&input, 7, "r", 3);
        let mut flattened: Vec<String> = plan.epochs.concat();
        assert_ne!(flattened, input, "shuffle left the order untouched");
        flattened.sort();
        assert_eq!(flattened, input);
        assert_eq!(plan, plan_run(&input, 7, "r", 3));
        assert_ne!(plan, plan_run(&input, 7, "r", 4));
    }

    #[test]
    fn clean_run_writes_every_epoch_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("checkpoint.json");
        let out = dir.path().join("outputs");
        let plan = plan_run(&users(10), 4, "run-a", 1);
        let summary =
            run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();
        assert_eq!(summary.processed_epochs, vec![0, 1, 2]);
        assert_eq!(summary.worker_calls, 10);
        assert_eq!(summary.dead_letters, 0);
        let checkpoint = load_checkpoint(&ckpt).unwrap().unwrap();
        assert_eq!(checkpoint.completed_epochs, vec![0, 1, 2]);
        assert_eq!(checkpoint.output_manifest.len(), 3);
        for (epoch, digest) in &checkpoint.output_manifest {
            let bytes = fs::read(epoch_path(&out, *epoch)).unwrap();
            assert_eq!(sha256_hex(&bytes), *digest);
        }
        let first = fs::read_to_string(epoch_path(&out, 0)).unwrap();
        assert_eq!(first.lines().count(), 4);
        assert!(first.contains("completion for"));
    }

    #[test]
    fn completed_run_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("checkpoint.json");
        let out = dir.path().join("outputs");
        let plan = plan_run(&users(9), 3, "run-a", 1);
        run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();

        let calls = AtomicUsize::new(0);
        let counting = |user: &str| {
            calls.fetch_add(1, Ordering::Relaxed);
            echo_worker(user)
        };
        let summary =
            run_epochs(&plan, &ckpt, &out, &counting, &RunConfig::default()).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 0);
        assert_eq!(summary.worker_calls, 0);
        assert_eq!(summary.skipped_epochs, vec![0, 1, 2]);
        assert!(summary.processed_epochs.is_empty());
    }

    #[test]
    fn every_crash_point_resumes_to_identical_bytes() {
        let plan = plan_run(&users(10), 4, "run-a", 1);
        let n_epochs = plan.epochs.len();

        let clean_dir = tempfile::tempdir().unwrap();
        run_epochs(
            &plan,
            &clean_dir.path().join("ckpt.json"),
            &clean_dir.path().join("out"),
            &echo_worker,
            &RunConfig::default(),
        )
        .unwrap();
        let reference = read_epochs(&clean_dir.path().join("out"), n_epochs);

        let mut points = Vec::new();
        for i in 0..n_epochs {
            points.push(FailurePoint::DuringEpoch(i));
            points.push(FailurePoint::AfterEpoch(i));
        }
        for point in points {
            let dir = tempfile::tempdir().unwrap();
            let ckpt = dir.path().join("ckpt.json");
            let out = dir.path().join("out");
            let crash_config = RunConfig { inject: Some(point), ..RunConfig::default() };
            let err = run_epochs(&plan, &ckpt, &out, &echo_worker, &crash_config).unwrap_err();
            assert!(matches!(err, OrchestratorError::InjectedFailure { .. }));

            let resumed =
                run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();
            assert_eq!(
                resumed.processed_epochs.len() + resumed.skipped_epochs.len(),
                n_epochs
            );
            assert_eq!(read_epochs(&out, n_epochs), reference, "diverged at {point:?}");
        }
    }

    #[test]
    fn resume_skips_committed_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let out = dir.path().join("out");
        let plan = plan_run(&users(12), 4, "run-a", 1);
        let crash = RunConfig {
            inject: Some(FailurePoint::AfterEpoch(1)),
            ..RunConfig::default()
        };
        run_epochs(&plan, &ckpt, &out, &echo_worker, &crash).unwrap_err();

        let summary =
            run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();
        assert_eq!(summary.skipped_epochs, vec![0, 1]);
        assert_eq!(summary.processed_epochs, vec![2]);
        assert_eq!(summary.worker_calls, 4);
    }

    #[test]
    fn digest_mismatch_forces_redo() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let out = dir.path().join("out");
        let plan = plan_run(&users(9), 3, "run-a", 1);
        run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();

        let reference = read_epochs(&out, 3);
        fs::write(epoch_path(&out, 1), b"tampered\n").unwrap();

        let summary =
            run_epochs(&plan, &ckpt, &out, &echo_worker, &RunConfig::default()).unwrap();
        assert_eq!(summary.processed_epochs, vec![1]);
        assert_eq!(summary.skipped_epochs, vec![0, 2]);
        assert_eq!(read_epochs(&out, 3), reference);
    }

    #[test]
    fn unreadable_checkpoint_is_loud() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        fs::write(&ckpt, b"{ not json").unwrap();
        let plan = plan_run(&users(4), 2, "run-a", 1);
        let err = run_epochs(
            &plan,
            &ckpt,
            &dir.path().join("out"),
            &echo_worker,
            &RunConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::CheckpointParse(_)));
    }

    #[test]
    fn foreign_run_id_starts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let out = dir.path().join("out");
        run_epochs(
            &plan_run(&users(6), 3, "run-a", 1),
            &ckpt,
            &out,
            &echo_worker,
            &RunConfig::default(),
        )
        .unwrap();
        let summary = run_epochs(
            &plan_run(&users(6), 3, "run-b", 2),
            &ckpt,
            &out,
            &echo_worker,
            &RunConfig::default(),
        )
        .unwrap();
        assert_eq!(summary.processed_epochs, vec![0, 1]);
        assert_eq!(load_checkpoint(&ckpt).unwrap().unwrap().run_id, "run-b");
    }

    #[test]
    fn failures_divert_to_dead_letters_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let out = dir.path().join("out");
        let plan = plan_run(&users(6), 3, "run-a", 1);
        let flaky = |user: &str| {
            if user == "user002" {
                Err("simulated outage".to_owned())
            } else {
                echo_worker(user)
            }
        };
        let summary = run_epochs(&plan, &ckpt, &out, &flaky, &RunConfig::default()).unwrap();
        assert_eq!(summary.dead_letters, 1);
        assert_eq!(summary.processed_epochs.len(), 2);
        let dead = fs::read_to_string(out.join("dead_letter.jsonl")).unwrap();
        assert!(dead.contains("user002"));
        assert!(dead.contains("simulated outage"));
        let all_output: String = read_epochs(&out, 2)
            .into_iter()
            .map(|b| String::from_utf8(b).unwrap())
            .collect();
        assert!(!all_output.contains("user002"));
        assert_eq!(all_output.lines().count(), 5);
    }

    #[test]
    fn concurrency_never_exceeds_the_limit() {
        let in_flight = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let worker = |user: &str| {
            let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            in_flight.fetch_sub(1, Ordering::SeqCst);
            echo_worker(user)
        };
        let results = process_users(&users(32), &worker, 4);
        assert_eq!(results.len(), 32);
        assert!(peak.load(Ordering::SeqCst) <= 4, "peak {}", peak.load(Ordering::SeqCst));
        assert!(results.iter().all(Result::is_ok));
    }

    #[test]
    fn results_keep_input_order_under_parallelism() {
        let input = users(40);
        let worker = |user: &str| {
            // Earlier users sleep longer, so completion order inverts.
            let idx: usize = user.trim_start_matches("user").parse().unwrap();
            std::thread::sleep(std::time::Duration::from_micros(
                (40 - idx.min(40)) as u64 * 50,
            ));
            echo_worker(user)
        };
        let results = process_users(&input, &worker, 8);
        for (user, result) in input.iter().zip(&results) {
            assert_eq!(result.as_ref().unwrap(), &format!("completion for {user}"));
        }
    }

    #[test]
    fn watermark_lands_in_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ckpt.json");
        let plan = plan_run(&users(4), 2, "run-a", 1);
        let config = RunConfig { watermark: 1_717_200_000, ..RunConfig::default() };
        run_epochs(&plan, &ckpt, &dir.path().join("out"), &echo_worker, &config).unwrap();
        let checkpoint = load_checkpoint(&ckpt).unwrap().unwrap();
        assert_eq!(checkpoint.last_success_timestamp, 1_717_200_000);
    }

    fn event_at(user: &str, ts: i64) -> Event {
        Event {
            user_id: user.into(),
            timestamp: ts,
            kind: EventKind::OnsiteSearch,
            advertiser_id: None,
            query: Some("q".into()),
            url: None,
            category: None,
            brand: None,
            dwell_seconds: None,
            conversion_type: None,
        }
    }

    #[test]
    fn incremental_set_is_users_with_fresh_events() {
        let all = users(4);
        let events = vec![
            event_at("user000", 100),
            event_at("user001", 200),
            event_at("user001", 50),
            event_at("user003", 150),
            event_at("stranger", 999),
        ];
        assert_eq!(
            incremental_user_set(&all, &events, 120),
            vec!["user001".to_owned(), "user003".to_owned()]
        );
        assert_eq!(incremental_user_set(&all, &events, 160), vec!["user001".to_owned()]);
        assert!(incremental_user_set(&all, &events, 1_000).is_empty());
    }

    #[test]
    fn incremental_complement_has_no_fresh_events() {
        let all = users(10);
        let mut events: Vec<Event> = all.iter().map(|u| event_at(u, 100)).collect();
        events.push(event_at("user002", 500));
        events.push(event_at("user007", 600));
        let incremental = incremental_user_set(&all, &events, 400);
        assert_eq!(incremental, vec!["user002".to_owned(), "user007".to_owned()]);
        // Users left out of the incremental run have nothing newer than
        // the watermark, so prior outputs remain valid for them.
        for user in all.iter().filter(|u| !incremental.contains(u)) {
            assert!(events
                .iter()
                .filter(|e| e.user_id == **user)
                .all(|e| e.timestamp <= 400));
        }
    }

    #[test]
    fn cache_accounting_prices_shared_prefixes() {
        use crate::compiler::UserContext;
        use crate::prompting::{render_prompt, PromptStage};

        let context = |user: &str| UserContext {
            profile: UserProfile {
                user_id: user.into(),
                age: Some(30),
                gender: None,
                user_state: "CA".into(),
            },
            past_conversion_advertisers: vec!["Acme".into()],
            preset_pool: vec!["Pool".into()],
            attributed_conversions: vec![],
            matched_conversions: vec![],
            onsite_searches: vec![format!("query from {user}")],
            offsite_searches: vec![],
            offsite_urls: vec![],
            top_categories: vec![],
            top_brands: vec![],
            sid_sequences: None,
        };
        let prompts: Vec<RenderedPrompt> = (0..10)
            .map(|i| {
                let ctx = context(&format!("u{i}"));
                render_prompt(&ctx, PromptStage::GrpoText, &ctx.preset_pool).unwrap()
            })
            .collect();
        let stats = cache_accounting(&prompts);
        assert_eq!(stats.total_prompts, 10);
        assert_eq!(stats.distinct_template_prefixes, 1);
        let prefix = prefix_registry()
            .into_iter()
            .find(|(h, _)| *h == prompts[0].template_prefix_hash)
            .unwrap()
            .1;
        assert!(prefix > 0);
        assert_eq!(stats.estimated_cached_tokens, 9 * prefix);
        let manual_total: usize = prompts.iter().map(|p| p.token_estimate).sum();
        assert_eq!(stats.estimated_total_tokens, manual_total);
        assert!(stats.estimated_cached_tokens < stats.estimated_total_tokens);

        // A second stage introduces a second prefix group.
        let ctx = context("u-sft");
        let mut mixed = prompts;
        mixed.push(render_prompt(&ctx, PromptStage::SftText, &ctx.preset_pool).unwrap());
        let stats = cache_accounting(&mixed);
        assert_eq!(stats.distinct_template_prefixes, 2);
        assert_eq!(stats.estimated_cached_tokens, 9 * prefix);
    }
}

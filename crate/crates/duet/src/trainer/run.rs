//! The pretraining loop: dataset acquisition, seeded random streams, the
//! per-epoch batch permutation, metrics emission, checkpoint cadence, and
//! exact resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_masked_batch, load_dataset, synth_dataset, PairRecord};
use crate::dual::{momentum_from_epoch_length, sample_drop_mask, DualNetwork};
use crate::objectives::{LossReport, MemoryQueue};
use crate::params::ParamStore;
use crate::trainer::{
    load_checkpoint, pretrain_step, save_checkpoint, AdamState, Checkpoint, MetricsRow, Result,
    RngState, StepSettings, TrainConfig, TrainError,
};

/// Splitmix-style seed derivation for independent random streams.
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_INIT: u64 = 1;
const SALT_MASK: u64 = 2;
const SALT_DROP: u64 = 3;
const SALT_PERM: u64 = 4;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Report of the last executed step, if any step ran.
    pub final_report: Option<LossReport>,
    pub global_step: u64,
    pub steps_per_epoch: usize,
    pub momentum: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Rebuilds live training state from a checkpoint.
pub fn restore_state(ckpt: &Checkpoint) -> Result<(DualNetwork, AdamState, MemoryQueue)> {
    let dims = ckpt.config.dims();
    dims.validate()?;
    // Fresh build defines the expected parameter inventory; snapshots must
    // agree with it name for name and shape for shape.
    let mut shape_rng = ChaCha8Rng::seed_from_u64(0);
    let template = DualNetwork::new(dims, ckpt.momentum, &mut shape_rng)?;
    let query = ParamStore::from_snapshot(&ckpt.query, true)?;
    let key = ParamStore::from_snapshot(&ckpt.key, false)?;
    if !template.query.congruent(&query) || !template.key.congruent(&key) {
        return Err(TrainError::Incompatible(
            "checkpoint parameters do not match the configured model".into(),
        ));
    }
    let net = DualNetwork {
        dims: template.dims,
        layout: template.layout,
        query,
        key,
        momentum: ckpt.momentum,
    };
    let adam = AdamState::from_snapshot(&ckpt.adam, &net.query)?;
    let queue = MemoryQueue::from_snapshot(&ckpt.queue)?;
    Ok((net, adam, queue))
}

/// Loads the configured dataset file or generates synthetic pairs, then
/// validates it against the model geometry.
pub fn acquire_records(cfg: &TrainConfig) -> Result<Vec<PairRecord>> {
    let mut faults: Vec<String> = Vec::new();
    let records = match &cfg.dataset {
        Some(path) => {
            let (header, records) = load_dataset(Path::new(path))?;
            if header.vocab != cfg.vocab {
                faults.push(format!(
                    "vocab: config says {}, dataset file says {}",
                    cfg.vocab, header.vocab
                ));
            }
            if header.regions != cfg.n_regions {
                faults.push(format!(
                    "n_regions: config says {}, dataset file says {}",
                    cfg.n_regions, header.regions
                ));
            }
            if header.d_o != cfg.d_o {
                faults.push(format!(
                    "d_o: config says {}, dataset file says {}",
                    cfg.d_o, header.d_o
                ));
            }
            records
        }
        None => synth_dataset(cfg.pairs, cfg.vocab, cfg.n_regions, cfg.d_o, cfg.data_seed)?,
    };
    if let Some(longest) = records.iter().map(|r| r.caption.len()).max() {
        if longest > cfg.max_len {
            faults.push(format!(
                "max_len: {} is shorter than the longest caption of {longest}",
                cfg.max_len
            ));
        }
    }
    if records.len() < cfg.batch_size {
        faults.push(format!(
            "batch_size: {} exceeds the dataset of {} pairs",
            cfg.batch_size,
            records.len()
        ));
    }
    if let Some(bad) = records
        .iter()
        .flat_map(|r| r.region_labels.iter())
        .find(|&&l| l >= cfg.n_labels)
    {
        faults.push(format!(
            "n_labels: {} does not cover region label {bad}",
            cfg.n_labels
        ));
    }
    if faults.is_empty() {
        Ok(records)
    } else {
        Err(TrainError::Validation(faults.join("; ")))
    }
}

/// Names the fields in which a resume config conflicts with the checkpoint
/// config. Run-shape fields (epochs, cadence, output, eval size) may differ.
fn resume_mismatches(run: &TrainConfig, ckpt: &TrainConfig) -> Vec<String> {
    let mut normalized = ckpt.clone();
    normalized.epochs = run.epochs;
    normalized.checkpoint_every = run.checkpoint_every;
    normalized.out_dir = run.out_dir.clone();
    normalized.eval_pairs = run.eval_pairs;
    if normalized == *run {
        return Vec::new();
    }
    let table = |cfg: &TrainConfig| -> std::collections::BTreeMap<String, String> {
        cfg.to_toml_string()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let a = table(run);
    let b = table(&normalized);
    let mut diff: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    for k in b.keys() {
        if !a.contains_key(k) {
            diff.push(k.clone());
        }
    }
    diff.sort();
    diff.dedup();
    diff
}

struct LiveState {
    net: DualNetwork,
    adam: AdamState,
    queue: MemoryQueue,
    mask_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
    global_step: u64,
    epoch: usize,
    step_in_epoch: usize,
}

fn fresh_state(cfg: &TrainConfig, momentum: f64) -> Result<LiveState> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_INIT));
    let net = DualNetwork::new(cfg.dims(), momentum, &mut init_rng)?;
    let adam = AdamState::new(&net.query);
    let queue = MemoryQueue::new(cfg.queue_capacity, cfg.d_w);
    Ok(LiveState {
        net,
        adam,
        queue,
        mask_rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_MASK)),
        drop_rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, SALT_DROP)),
        global_step: 0,
        epoch: 0,
        step_in_epoch: 0,
    })
}

fn resumed_state(cfg: &TrainConfig, path: &Path) -> Result<LiveState> {
    let ckpt = load_checkpoint(path)?;
    let conflicts = resume_mismatches(cfg, &ckpt.config);
    if !conflicts.is_empty() {
        return Err(TrainError::Validation(format!(
            "resume config conflicts with the checkpoint at: {}",
            conflicts.join(", ")
        )));
    }
    let (net, adam, queue) = restore_state(&ckpt)?;
    Ok(LiveState {
        net,
        adam,
        queue,
        mask_rng: ckpt.mask_rng.restore(),
        drop_rng: ckpt.drop_rng.restore(),
        global_step: ckpt.global_step,
        epoch: ckpt.epoch,
        step_in_epoch: ckpt.step_in_epoch,
    })
}

fn capture(cfg: &TrainConfig, state: &LiveState, epoch: usize, step_in_epoch: usize) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        query: state.net.query.snapshot(),
        key: state.net.key.snapshot(),
        adam: state.adam.snapshot(),
        queue: state.queue.snapshot(),
        momentum: state.net.momentum,
        global_step: state.global_step,
        epoch,
        step_in_epoch,
        mask_rng: RngState::capture(&state.mask_rng),
        drop_rng: RngState::capture(&state.drop_rng),
    }
}

/// Trains per the config, resuming from a checkpoint when given. Emits one
/// metrics row per step (appending when resuming into an existing run
/// directory) and a final checkpoint; deterministic for a fixed seed.
pub fn run_pretrain(cfg: &TrainConfig, resume: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let records = acquire_records(cfg)?;
    let steps_per_epoch = records.len() / cfg.batch_size;
    let momentum = match cfg.momentum {
        Some(m) => m,
        None => momentum_from_epoch_length(steps_per_epoch)?,
    };

    let mut state = match resume {
        Some(path) => resumed_state(cfg, path)?,
        None => fresh_state(cfg, momentum)?,
    };

    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let metrics_path = out_dir.join("metrics.txt");
    let mut metrics = std::io::BufWriter::new(if resume.is_some() {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    } else {
        std::fs::File::create(&metrics_path)?
    });

    let schedule = cfg.droplayer();
    schedule.validate()?;
    let settings = StepSettings {
        contrast: cfg.contrast_config(),
        adam: cfg.adam(),
        key_first: cfg.key_first,
    };
    let mask_cfg = cfg.mask_config();
    let enc = cfg.enc();

    let mut final_report = None;
    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.epochs {
        let mut perm: Vec<usize> = (0..records.len()).collect();
        let mut perm_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, mix(SALT_PERM, epoch as u64)));
        perm.shuffle(&mut perm_rng);
        let first = if epoch == start_epoch {
            state.step_in_epoch
        } else {
            0
        };
        for s in first..steps_per_epoch {
            let indices = &perm[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let drop = sample_drop_mask(&schedule, &enc, epoch, &mut state.drop_rng);
            let batch = build_masked_batch(
                &records,
                indices,
                cfg.vocab,
                &mask_cfg,
                cfg.swap_prob,
                cfg.mask_vision(),
                &mut state.mask_rng,
            )?;
            let (report, trace) = pretrain_step(
                &mut state.net,
                &mut state.adam,
                &mut state.queue,
                &batch,
                &drop,
                &settings,
            )?;
            state.global_step += 1;
            let row = MetricsRow {
                step: state.global_step,
                epoch,
                report,
                momentum: state.net.momentum,
                queue_fill: trace.queue_after,
                dropped_layers: trace.dropped_layers,
            };
            writeln!(metrics, "{row}")?;
            final_report = Some(report);

            if cfg.checkpoint_every > 0 && state.global_step % cfg.checkpoint_every as u64 == 0 {
                let (ck_epoch, ck_step) = if s + 1 == steps_per_epoch {
                    (epoch + 1, 0)
                } else {
                    (epoch, s + 1)
                };
                let ckpt = capture(cfg, &state, ck_epoch, ck_step);
                save_checkpoint(&out_dir.join(format!("step{}.ckpt", state.global_step)), &ckpt)?;
            }
        }
    }
    metrics.flush()?;

    let checkpoint_path = out_dir.join("final.ckpt");
    let ckpt = capture(cfg, &state, cfg.epochs, 0);
    save_checkpoint(&checkpoint_path, &ckpt)?;

    Ok(RunOutcome {
        final_report,
        global_step: state.global_step,
        steps_per_epoch,
        momentum: state.net.momentum,
        metrics_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::VisionTask;
    use crate::trainer::read_metrics;

    fn tiny_cfg(out: &Path) -> TrainConfig {
        TrainConfig {
            d_w: 16,
            heads: 2,
            n_lang: 1,
            n_vis: 1,
            n_co: 1,
            ffn_mult: 2,
            vocab: 30,
            max_len: 8,
            d_o: 6,
            n_labels: 12,
            n_regions: 3,
            pairs: 12,
            queue_capacity: 24,
            batch_size: 4,
            epochs: 4,
            out_dir: out.to_string_lossy().into_owned(),
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn fixed_seed_runs_produce_identical_metrics_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = tiny_cfg(&dir.path().join("a"));
        let cfg_b = tiny_cfg(&dir.path().join("b"));
        let out_a = run_pretrain(&cfg_a, None).unwrap();
        let out_b = run_pretrain(&cfg_b, None).unwrap();
        let a = std::fs::read_to_string(&out_a.metrics_path).unwrap();
        let b = std::fs::read_to_string(&out_b.metrics_path).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
        assert_eq!(out_a.global_step, 12);
        assert_eq!(out_a.steps_per_epoch, 3);
        // Derived momentum follows the epoch length.
        assert!((out_a.momentum - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_row_for_row() {
        let dir = tempfile::tempdir().unwrap();
        // Straight run: 4 epochs.
        let straight = tiny_cfg(&dir.path().join("straight"));
        let straight_out = run_pretrain(&straight, None).unwrap();

        // Split run: 2 epochs, then resume into the same directory for 4.
        let mut split = tiny_cfg(&dir.path().join("split"));
        split.epochs = 2;
        let half = run_pretrain(&split, None).unwrap();
        split.epochs = 4;
        let resumed = run_pretrain(&split, Some(&half.checkpoint_path)).unwrap();

        let a = std::fs::read_to_string(&straight_out.metrics_path).unwrap();
        let b = std::fs::read_to_string(&resumed.metrics_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mid_epoch_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let straight = tiny_cfg(&dir.path().join("straight"));
        let straight_out = run_pretrain(&straight, None).unwrap();

        // Checkpoint every 2 steps; steps_per_epoch is 3, so step 4 lands
        // mid-epoch (epoch 1, one step done).
        let mut split = tiny_cfg(&dir.path().join("split"));
        split.checkpoint_every = 2;
        split.epochs = 2;
        run_pretrain(&split, None).unwrap();
        let mid = dir.path().join("split").join("step4.ckpt");
        assert!(mid.exists());
        // Trim the metrics file to the rows before the checkpoint, then
        // resume from it for the full run.
        let metrics_path = dir.path().join("split").join("metrics.txt");
        let rows: Vec<String> = std::fs::read_to_string(&metrics_path)
            .unwrap()
            .lines()
            .take(4)
            .map(|s| format!("{s}\n"))
            .collect();
        std::fs::write(&metrics_path, rows.concat()).unwrap();
        split.epochs = 4;
        split.checkpoint_every = 0;
        let resumed = run_pretrain(&split, Some(&mid)).unwrap();
        let a = std::fs::read_to_string(&straight_out.metrics_path).unwrap();
        let b = std::fs::read_to_string(&resumed.metrics_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_with_conflicting_config_names_the_fields() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(&dir.path().join("run"));
        cfg.epochs = 1;
        let out = run_pretrain(&cfg, None).unwrap();
        let mut other = cfg.clone();
        other.learning_rate = 0.5;
        other.temperature = 0.2;
        let err = run_pretrain(&other, Some(&out.checkpoint_path)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("temperature"), "{msg}");
        // Extending epochs alone is allowed.
        let mut extend = cfg.clone();
        extend.epochs = 2;
        run_pretrain(&extend, Some(&out.checkpoint_path)).unwrap();
    }

    #[test]
    fn metrics_rows_carry_step_epoch_and_queue_fill() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("run"));
        let out = run_pretrain(&cfg, None).unwrap();
        let rows = read_metrics(&out.metrics_path).unwrap();
        assert_eq!(rows.len(), 12);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.step, i as u64 + 1);
            assert_eq!(row.epoch, i / 3);
            // 4 pairs x 3 regions per step, capacity 24.
            assert_eq!(row.queue_fill, ((i + 1) * 12).min(24));
            assert_eq!(row.dropped_layers, 0);
        }
    }

    #[test]
    fn no_vision_composition_trains_and_skips_the_queue() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(&dir.path().join("run"));
        cfg.vision_task = VisionTask::None;
        let out = run_pretrain(&cfg, None).unwrap();
        let rows = read_metrics(&out.metrics_path).unwrap();
        assert!(rows.iter().all(|r| r.report.contrast == 0.0));
        assert!(rows.iter().all(|r| r.queue_fill == 0));
    }

    #[test]
    fn invalid_config_is_rejected_before_any_work() {
        let mut cfg = TrainConfig::desk();
        cfg.temperature = 0.0;
        let err = run_pretrain(&cfg, None).unwrap_err();
        assert!(matches!(err, TrainError::Validation(_)), "{err}");
    }

    #[test]
    fn dataset_and_config_disagreements_name_the_fields() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("pairs.txt");
        let records = crate::data::synth_dataset(8, 40, 5, 6, 3).unwrap();
        crate::data::save_dataset(&data_path, &records, 40).unwrap();
        let mut cfg = tiny_cfg(&dir.path().join("run"));
        cfg.dataset = Some(data_path.to_string_lossy().into_owned());
        cfg.vocab = 30; // file says 40
        cfg.n_regions = 3; // file says 5
        let err = run_pretrain(&cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vocab"), "{msg}");
        assert!(msg.contains("n_regions"), "{msg}");
    }
}

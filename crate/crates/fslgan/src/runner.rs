//! Experiment runner: reproduces the timing benchmark (bottleneck time per
//! splitting strategy) and the accuracy benchmark (federated training across
//! an M sweep), emitting CSV metrics, SVG charts, and PGM sample grids.
//!
//! All randomness is derived from config seeds, so reruns of the same
//! resolved config produce byte-identical CSVs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DeviceSection, ExperimentConfig};
use crate::dataio::{load_idx, shard, Dataset};
use crate::error::{Error, Result};
use crate::fed::{derive_seed, FedState, RoundMetrics};
use crate::fdcheck::{self, FD_TOL};
use crate::gan::{build_discriminator, generate, sample_latent, Generator};
use crate::splitplan::{assign, partition, AssignOutcome, ClientSpec, DeviceProfile, PortionSpec, Strategy};
use crate::timesim::{build_ledger, ledger_csv_rows};
use crate::viz::{pgm_grid, svg_bar_chart, svg_line_chart, write_pgm};

const TAG_POOL: u64 = 10;
const TAG_ASSIGN: u64 = 11;
const TAG_GRID: u64 = 12;

pub const METRICS_HEADER: &str = "epoch,g_loss,d_loss_mean,bottleneck_s,eligible_count\n";
pub const TIMING_HEADER: &str = "epoch,client_id,compute_s,lan_s,total_s,is_bottleneck\n";
pub const TIME_DETAIL_HEADER: &str = "strategy,seed,bottleneck_s,eligible_count\n";
pub const TIME_SUMMARY_HEADER: &str = "strategy,mean_bottleneck_s,std_bottleneck_s,runs\n";
pub const NN_HEADER: &str = "m,epoch,nn_l2\n";

/// Draw one pool of `num_clients` clients from the device-generation spec.
/// One capacity unit equals the largest portion's memory, so integer unit
/// budgets scale with the model being split.
pub fn generate_device_pools(
    devs: &DeviceSection,
    num_clients: usize,
    portions: &[PortionSpec],
    pool_seed: u64,
) -> Result<Vec<ClientSpec>> {
    let unit = portions
        .iter()
        .map(|p| p.mem)
        .fold(0.0, f64::max);
    if devs.mode == "explicit" {
        if devs.explicit.len() != num_clients {
            return Err(Error::Config(format!(
                "explicit device list covers {} clients, expected {num_clients}",
                devs.explicit.len()
            )));
        }
        let mut next_id = 0;
        return Ok(devs
            .explicit
            .iter()
            .enumerate()
            .map(|(client_id, inits)| ClientSpec {
                client_id,
                devices: inits
                    .iter()
                    .map(|d| {
                        let dev = DeviceProfile {
                            device_id: next_id,
                            time_factor: d.time_factor,
                            capacity: d.capacity_units * unit,
                        };
                        next_id += 1;
                        dev
                    })
                    .collect(),
            })
            .collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
    let [tf_lo, tf_hi] = devs.time_factor_range;
    let [cap_lo, cap_hi] = devs.capacity_units_range;
    let mut next_id = 0;
    Ok((0..num_clients)
        .map(|client_id| ClientSpec {
            client_id,
            devices: (0..devs.devices_per_client)
                .map(|_| {
                    let dev = DeviceProfile {
                        device_id: next_id,
                        time_factor: rng.gen_range(tf_lo..=tf_hi),
                        capacity: rng.gen_range(cap_lo..=cap_hi) as f64 * unit,
                    };
                    next_id += 1;
                    dev
                })
                .collect(),
        })
        .collect())
}

/// Bottleneck time of one (strategy, pool) cell, or None if no client could
/// be planned. Clients that fail assignment are simply excluded, mirroring
/// the eligibility rule.
pub fn pool_bottleneck(
    strategy: Strategy,
    strategy_idx: u64,
    pool: &[ClientSpec],
    portions: &[PortionSpec],
    cfg: &ExperimentConfig,
    seed_idx: u64,
) -> Result<(Option<f64>, usize)> {
    let mut planned: Vec<(usize, crate::splitplan::AssignmentPlan, &ClientSpec)> = Vec::new();
    for client in pool {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.devices.seed,
            TAG_ASSIGN,
            strategy_idx,
            seed_idx,
            client.client_id as u64,
        ));
        if let AssignOutcome::Plan(p) = assign(strategy, portions, client, &mut rng) {
            planned.push((client.client_id, p, client));
        }
    }
    if planned.is_empty() {
        return Ok((None, 0));
    }
    let entries: Vec<_> = planned
        .iter()
        .map(|(id, plan, client)| (*id, plan, portions, client.devices.as_slice()))
        .collect();
    let ledger = build_ledger(&entries, &cfg.timing)?;
    Ok((Some(ledger.bottleneck_time), planned.len()))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

fn write_outputs(dir: &Path, files: &[(&str, &str)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, content) in files {
        std::fs::write(dir.join(name), content)?;
    }
    Ok(())
}

/// Timing benchmark: bottleneck time per strategy over seeded device pools,
/// plus an optional M=1 sorted_multiple baseline.
pub fn run_time_benchmark(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let disc = build_discriminator(cfg.federation.seed);
    let portions = partition(&disc, cfg.federation.granularity);
    let m = cfg.federation.num_clients;

    let mut detail = String::from(TIME_DETAIL_HEADER);
    let mut summary = String::from(TIME_SUMMARY_HEADER);
    let mut bars: Vec<(String, f64, f64)> = Vec::new();

    let mut cells: Vec<(String, u64, usize)> = Strategy::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name().to_string(), i as u64, m))
        .collect();
    if cfg.time_bench.include_baseline {
        cells.push(("baseline_m1_sorted_multiple".to_string(), 4, 1));
    }

    for (label, strategy_idx, num_clients) in &cells {
        let strategy = match *strategy_idx {
            4 => Strategy::SortedMultiple,
            i => Strategy::ALL[i as usize],
        };
        let mut times = Vec::new();
        for seed_idx in 0..cfg.time_bench.seeds as u64 {
            // pools are shared across strategies for paired comparison
            let pool_seed = derive_seed(cfg.devices.seed, TAG_POOL, seed_idx, *num_clients as u64, 0);
            let pool = generate_device_pools(&cfg.devices, *num_clients, &portions, pool_seed)?;
            let (bottleneck, eligible) =
                pool_bottleneck(strategy, *strategy_idx, &pool, &portions, cfg, seed_idx)?;
            match bottleneck {
                Some(t) => {
                    times.push(t);
                    detail.push_str(&format!("{label},{seed_idx},{t},{eligible}\n"));
                }
                None => detail.push_str(&format!("{label},{seed_idx},,0\n")),
            }
        }
        let (mean, std) = mean_std(&times);
        summary.push_str(&format!("{label},{mean},{std},{}\n", times.len()));
        bars.push((label.clone(), mean, std));
    }

    let chart = svg_bar_chart(
        "Mean bottleneck epoch time by splitting strategy",
        "seconds per epoch",
        &bars,
    );
    write_outputs(
        &cfg.output_dir,
        &[
            ("config_resolved.toml", &cfg.resolved_toml()),
            ("time_bench_detail.csv", &detail),
            ("time_bench_summary.csv", &summary),
            ("time_bench.svg", &chart),
        ],
    )
}

fn find_idx_file(root: &Path, base: &str) -> Result<PathBuf> {
    for candidate in [root.join(base), root.join(format!("{base}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Config(format!(
        "dataset file {base}[.gz] not found under {}",
        root.display()
    )))
}

/// Load the training set (optionally a seeded subset) and the test set.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let root = cfg.data_root();
    let train = load_idx(
        find_idx_file(&root, "train-images-idx3-ubyte")?,
        find_idx_file(&root, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        find_idx_file(&root, "t10k-images-idx3-ubyte")?,
        find_idx_file(&root, "t10k-labels-idx1-ubyte")?,
    )?;
    let train = if cfg.data.subset > 0 {
        train.subset_shuffled(cfg.data.subset, cfg.federation.seed)?
    } else {
        train
    };
    Ok((train, test))
}

/// Mean nearest-neighbor L2 distance from each generated image to the
/// held-out real set.
pub fn mean_nn_l2(generated: &crate::tensor::Tensor, holdout: &Dataset) -> f64 {
    let n = generated.shape()[0];
    let dim: usize = generated.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let g = &generated.data()[i * dim..(i + 1) * dim];
        let mut best = f64::INFINITY;
        for j in 0..holdout.len() {
            let r = holdout.image(j);
            let d2: f64 = g.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total / n as f64
}

/// State and artifacts of one M cell of the accuracy benchmark.
pub struct AccRun {
    pub m: usize,
    pub metrics: Vec<RoundMetrics>,
    pub nn_rows: Vec<(usize, f64)>,
}

fn dump_grid(
    gen: &mut Generator,
    z: &crate::tensor::Tensor,
    holdout: &Dataset,
    out_dir: &Path,
    m: usize,
    epoch: usize,
    nn_rows: &mut Vec<(usize, f64)>,
) -> Result<()> {
    let imgs = generate(gen, z)?;
    let (w, h, bytes) = pgm_grid(&imgs, 8)?;
    write_pgm(out_dir.join(format!("m{m}_epoch{epoch:03}.pgm")), w, h, &bytes)?;
    nn_rows.push((epoch, mean_nn_l2(&imgs, holdout)));
    Ok(())
}

/// Run one full federated training for a given M.
pub fn run_training(
    cfg: &ExperimentConfig,
    m: usize,
    dataset: &Arc<Dataset>,
    holdout: &Dataset,
    out_dir: &Path,
    timing_csv: &mut String,
) -> Result<AccRun> {
    let shards = shard(dataset, m, cfg.data.shard_mode, cfg.federation.seed)?;
    let pool_seed = derive_seed(cfg.devices.seed, TAG_POOL, 0, m as u64, 1);
    let disc = build_discriminator(cfg.federation.seed);
    let portions = partition(&disc, cfg.federation.granularity);
    let pool = generate_device_pools(&cfg.devices, m, &portions, pool_seed)?;
    let mut state = FedState::new(cfg.federation_config(m), pool, Arc::clone(dataset), shards)?;

    let z = sample_latent(
        cfg.acc_bench.grid_samples,
        cfg.federation.latent_dim,
        derive_seed(cfg.federation.seed, TAG_GRID, m as u64, 0, 0),
    );
    let mut nn_rows = Vec::new();
    let mut metrics = Vec::new();
    let epochs = cfg.federation.epochs;
    if epochs > 0 {
        dump_grid(&mut state.generator, &z, holdout, out_dir, m, 0, &mut nn_rows)?;
        let interval = cfg.acc_bench.image_interval;
        for epoch in 1..=epochs {
            let round = state.run_round(epoch)?;
            timing_csv.push_str(&ledger_csv_rows(epoch, &state.ledger));
            metrics.push(round);
            if epoch == epochs || (interval > 0 && epoch % interval == 0) {
                dump_grid(&mut state.generator, &z, holdout, out_dir, m, epoch, &mut nn_rows)?;
            }
        }
    }
    Ok(AccRun { m, metrics, nn_rows })
}

/// Accuracy benchmark: federated training across the configured M sweep.
pub fn run_accuracy_benchmark(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let (train, test) = load_datasets(cfg)?;
    let holdout = test.subset(cfg.acc_bench.holdout_size.min(test.len()));
    let dataset = Arc::new(train);

    let mut nn_csv = String::from(NN_HEADER);
    let mut series = Vec::new();
    for &m in &cfg.acc_bench.m_list {
        let mut timing_csv = String::from(TIMING_HEADER);
        let run = run_training(cfg, m, &dataset, &holdout, &cfg.output_dir, &mut timing_csv)?;
        let mut csv = String::from(METRICS_HEADER);
        for r in &run.metrics {
            csv.push_str(&r.csv_row());
        }
        std::fs::write(cfg.output_dir.join(format!("acc_m{m}.csv")), &csv)?;
        std::fs::write(cfg.output_dir.join(format!("acc_m{m}_timing.csv")), &timing_csv)?;
        for (epoch, nn) in &run.nn_rows {
            nn_csv.push_str(&format!("{m},{epoch},{nn}\n"));
        }
        series.push((
            format!("M={m}"),
            run.metrics
                .iter()
                .map(|r| (r.epoch as f64, r.g_loss))
                .collect::<Vec<_>>(),
        ));
    }
    let chart = svg_line_chart(
        "Generator loss by number of discriminators",
        "epoch",
        "g_loss",
        &series,
    );
    write_outputs(
        &cfg.output_dir,
        &[
            ("config_resolved.toml", &cfg.resolved_toml()),
            ("acc_nn.csv", &nn_csv),
            ("acc_bench.svg", &chart),
        ],
    )
}

/// Re-run both benchmarks from a previously emitted resolved config. Outputs
/// land in a `replay` directory next to the config so originals are kept.
pub fn replay(config_resolved: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_resolved)?;
    let parent = config_resolved
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    cfg.output_dir = parent.join("replay");
    run_time_benchmark(&cfg)?;
    run_accuracy_benchmark(&cfg)
}

/// Finite-difference checks for every layer kind plus a reduced end-to-end
/// pair; prints one line per check and returns overall success.
pub fn gradcheck_report() -> Result<bool> {
    let mut ok = true;
    for report in fdcheck::standard_layer_checks(FD_TOL)? {
        let status = if report.pass() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<18} max_rel_err {:.3e}",
            report.name, report.max_rel_err
        );
        ok &= report.pass();
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splitplan::Granularity;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.output_dir = dir.to_path_buf();
        cfg.time_bench.seeds = 5;
        cfg.time_bench.include_baseline = false;
        cfg
    }

    #[test]
    fn pool_generation_is_seeded_and_in_unit_range() {
        let disc = build_discriminator(3);
        let portions = partition(&disc, Granularity::PerBlock);
        let unit = portions.iter().map(|p| p.mem).fold(0.0, f64::max);
        let devs = DeviceSection::default();
        let a = generate_device_pools(&devs, 5, &portions, 42).unwrap();
        let b = generate_device_pools(&devs, 5, &portions, 42).unwrap();
        assert_eq!(a.len(), 5);
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.devices, cb.devices);
            for d in &ca.devices {
                assert!((1.0..=8.0).contains(&d.time_factor));
                let units = d.capacity / unit;
                assert!((units - units.round()).abs() < 1e-12);
                assert!((1.0..=4.0).contains(&units));
            }
        }
        assert_ne!(
            a[0].devices,
            generate_device_pools(&devs, 5, &portions, 43).unwrap()[0].devices
        );
    }

    #[test]
    fn homogeneous_ample_pools_tie_across_strategies() {
        // identical devices with capacity for the whole model: every strategy
        // yields the same bottleneck time whenever its plans have equal cuts;
        // with ample capacity multiple-strategies use one device (0 cuts)
        let disc = build_discriminator(3);
        let portions = partition(&disc, Granularity::PerBlock);
        let total_mem: f64 = portions.iter().map(|p| p.mem).sum();
        let unit = portions.iter().map(|p| p.mem).fold(0.0, f64::max);
        let mut cfg = ExperimentConfig::reference_default();
        cfg.devices.mode = "explicit".into();
        let units = (total_mem / unit).ceil() + 1.0;
        cfg.devices.explicit = vec![
            vec![
                crate::config::DeviceInit { time_factor: 2.0, capacity_units: units };
                4
            ];
            5
        ];
        let pool = generate_device_pools(&cfg.devices, 5, &portions, 0).unwrap();
        let (t_sm, _) =
            pool_bottleneck(Strategy::SortedMultiple, 3, &pool, &portions, &cfg, 0).unwrap();
        let (t_rm, _) =
            pool_bottleneck(Strategy::RandomMultiple, 1, &pool, &portions, &cfg, 0).unwrap();
        assert_eq!(t_sm.unwrap(), t_rm.unwrap());
    }

    #[test]
    fn time_benchmark_outputs_have_expected_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        run_time_benchmark(&cfg).unwrap();
        let detail = std::fs::read_to_string(dir.path().join("time_bench_detail.csv")).unwrap();
        // header + strategies x seeds
        assert_eq!(detail.lines().count(), 1 + 4 * 5);
        let summary = std::fs::read_to_string(dir.path().join("time_bench_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 4);
        assert!(dir.path().join("time_bench.svg").is_file());
        assert!(dir.path().join("config_resolved.toml").is_file());
    }

    #[test]
    fn time_benchmark_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_time_benchmark(&small_cfg(d1.path())).unwrap();
        run_time_benchmark(&small_cfg(d2.path())).unwrap();
        for name in ["time_bench_detail.csv", "time_bench_summary.csv"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name} differs between reruns"
            );
        }
    }

    #[test]
    fn nn_metric_is_zero_on_identical_sets() {
        let img = crate::fdcheck::random_input(&[2, 1, 32, 32], 9);
        let ds = Dataset {
            images: img.clone(),
            labels: vec![0, 1],
        };
        assert_eq!(mean_nn_l2(&img, &ds), 0.0);
        let shifted = crate::tensor::Tensor::from_vec(
            img.shape(),
            img.data().iter().map(|v| v + 1.0).collect(),
        )
        .unwrap();
        // every pixel off by 1 -> distance exactly sqrt(1024) = 32
        assert!((mean_nn_l2(&shifted, &ds) - 32.0).abs() < 1e-9);
    }
}

//! Federation orchestrator: per-epoch protocol tying the central generator,
//! per-client split discriminators, FedAvg aggregation, and the timing model
//! together.
//!
//! Fake images travel to clients as plain data, never as differentiable graph
//! nodes, so no gradient flows from clients back to the generator. Clients
//! within a round may run in parallel; the aggregation order is fixed by
//! client_id, so parallel and serial execution agree bit for bit.

use std::sync::Arc;

use rand::SeedableRng;

use crate::dataio::{sample_batches, Dataset, Shard};
use crate::error::{Error, Result};
use crate::gan::{
    build_discriminator, build_generator, d_loss, d_loss_grads, generator_step, generate,
    sample_latent, Discriminator, Generator,
};
use crate::layers::Mode;
use crate::network::AdamState;
use crate::splitplan::{
    assign, is_eligible, partition, AssignOutcome, AssignmentPlan, ClientSpec, Granularity,
    PortionSpec, Strategy,
};
use crate::timesim::{build_ledger, TimingConfig, TimingLedger};

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub epochs: usize,
    pub g_steps_per_round: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub granularity: Granularity,
    pub latent_dim: usize,
    pub lr: f64,
    pub timing: TimingConfig,
}

/// Per-epoch outcome of one federation round.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub epoch: usize,
    /// Mean generator loss over the round's generator steps.
    pub g_loss: f64,
    /// (client_id, mean discriminator loss) per eligible client.
    pub d_losses: Vec<(usize, f64)>,
    /// (client_id, simulated epoch seconds) per eligible client.
    pub epoch_times: Vec<(usize, f64)>,
    pub bottleneck_time: f64,
    pub eligible_client_ids: Vec<usize>,
}

impl RoundMetrics {
    pub fn d_loss_mean(&self) -> f64 {
        if self.d_losses.is_empty() {
            return 0.0;
        }
        self.d_losses.iter().map(|(_, l)| l).sum::<f64>() / self.d_losses.len() as f64
    }

    /// CSV row `epoch,g_loss,d_loss_mean,bottleneck_s,eligible_count`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}\n",
            self.epoch,
            self.g_loss,
            self.d_loss_mean(),
            self.bottleneck_time,
            self.eligible_client_ids.len()
        )
    }
}

/// Weighted mean of parameter vectors, weights proportional to client sample
/// counts. Inputs must already be in ascending client order.
pub fn fedavg(param_vectors: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if param_vectors.is_empty() || param_vectors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            context: "fedavg: vectors vs weights".into(),
            expected: param_vectors.len(),
            got: weights.len(),
        });
    }
    let n = param_vectors[0].len();
    for v in param_vectors {
        if v.len() != n {
            return Err(Error::LengthMismatch {
                context: "fedavg: ragged parameter vectors".into(),
                expected: n,
                got: v.len(),
            });
        }
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || total <= 0.0 {
        return Err(Error::Config(
            "fedavg weights must be nonnegative with positive sum".into(),
        ));
    }
    let mut out = vec![0.0; n];
    for (v, &w) in param_vectors.iter().zip(weights) {
        let scale = w / total;
        for (o, x) in out.iter_mut().zip(v) {
            *o += scale * x;
        }
    }
    Ok(out)
}

fn validate_plan(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    disc: &Discriminator,
) -> Result<()> {
    if plan.assignments.len() != portions.len() {
        return Err(Error::InvalidPlan(format!(
            "plan covers {} of {} portions",
            plan.assignments.len(),
            portions.len()
        )));
    }
    let covered: usize = portions.iter().map(|p| p.layer_range.len()).sum();
    if covered != disc.network.len() {
        return Err(Error::InvalidPlan(format!(
            "portions cover {covered} of {} layers",
            disc.network.len()
        )));
    }
    Ok(())
}

/// Forward+backward for one labeled pair of batches, executed portion by
/// portion along the plan. Activations cross portion boundaries exactly where
/// the plan places cuts; the math is identical to monolithic execution, so
/// loss and gradients are bit-identical to an unsplit run. Gradients are
/// accumulated into the discriminator; no optimizer step is taken.
pub fn split_forward_backward(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    disc: &mut Discriminator,
    real_batch: &crate::tensor::Tensor,
    fake_batch: &crate::tensor::Tensor,
) -> Result<f64> {
    validate_plan(plan, portions, disc)?;
    disc.network.mode = Mode::Train;

    let split_forward = |disc: &mut Discriminator, input: &crate::tensor::Tensor| {
        let mut x = input.clone();
        for (portion_id, _device) in &plan.assignments {
            // activation transfer at every portion boundary
            x = disc
                .network
                .forward_range(portions[*portion_id].layer_range.clone(), &x)?;
        }
        Ok::<_, Error>(x)
    };
    let split_backward = |disc: &mut Discriminator, upstream: &crate::tensor::Tensor| {
        let mut g = upstream.clone();
        for (portion_id, _device) in plan.assignments.iter().rev() {
            g = disc
                .network
                .backward_range(portions[*portion_id].layer_range.clone(), &g, true)?;
        }
        Ok::<_, Error>(g)
    };

    let d_real = split_forward(disc, real_batch)?;
    let (g_real, _) = d_loss_grads(&d_real, &d_real);
    split_backward(disc, &g_real)?;
    let d_fake = split_forward(disc, fake_batch)?;
    let (_, g_fake) = d_loss_grads(&d_fake, &d_fake);
    split_backward(disc, &g_fake)?;
    d_loss(&d_real, &d_fake)
}

/// Split-aware discriminator step: [`split_forward_backward`] plus one Adam
/// update. Returns the pre-update loss.
pub fn discriminator_step_split(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    disc: &mut Discriminator,
    real_batch: &crate::tensor::Tensor,
    fake_batch: &crate::tensor::Tensor,
    optimizer: &mut AdamState,
) -> Result<f64> {
    disc.network.zero_grads();
    let loss = split_forward_backward(plan, portions, disc, real_batch, fake_batch)?;
    optimizer.update(&mut disc.network)?;
    disc.network.zero_grads();
    Ok(loss)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-(role, epoch, client, batch) seed derivation.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> u64 {
    splitmix(
        splitmix(seed ^ tag.wrapping_mul(0xa076_1d64_78bd_642f))
            ^ splitmix(a.wrapping_add(1))
            ^ splitmix(b.wrapping_add(2)).rotate_left(17)
            ^ splitmix(c.wrapping_add(3)).rotate_left(34),
    )
}

const TAG_DATA: u64 = 1;
const TAG_FAKE: u64 = 2;
const TAG_GEN: u64 = 3;

struct ClientState {
    spec: ClientSpec,
    plan: AssignmentPlan,
    shard: Shard,
    adam: AdamState,
}

/// Orchestrator state for a full federated run.
pub struct FedState {
    pub cfg: FederationConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub portions: Vec<PortionSpec>,
    gen_adam: AdamState,
    clients: Vec<ClientState>,
    dataset: Arc<Dataset>,
    /// Static per-epoch timing (plans are fixed at setup).
    pub ledger: TimingLedger,
    pub ineligible_client_ids: Vec<usize>,
}

impl FedState {
    /// Eligibility and assignment are computed once here; plans stay static
    /// for the whole run.
    pub fn new(
        cfg: FederationConfig,
        client_specs: Vec<ClientSpec>,
        dataset: Arc<Dataset>,
        shards: Vec<Shard>,
    ) -> Result<FedState> {
        assert_eq!(client_specs.len(), cfg.num_clients);
        assert_eq!(shards.len(), cfg.num_clients);
        let generator = build_generator(cfg.latent_dim, derive_seed(cfg.seed, 0, 0, 0, 1));
        let discriminator = build_discriminator(derive_seed(cfg.seed, 0, 0, 0, 2));
        let portions = partition(&discriminator, cfg.granularity);

        let mut clients = Vec::new();
        let mut ineligible = Vec::new();
        for (spec, shard) in client_specs.into_iter().zip(shards) {
            if !is_eligible(&spec, &portions) {
                ineligible.push(spec.client_id);
                continue;
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                4,
                spec.client_id as u64,
                0,
                0,
            ));
            let plan = match assign(cfg.strategy, &portions, &spec, &mut rng) {
                AssignOutcome::Plan(p) => p,
                AssignOutcome::Ineligible => {
                    ineligible.push(spec.client_id);
                    continue;
                }
            };
            let adam = AdamState::new(&discriminator.network, cfg.lr);
            clients.push(ClientState {
                spec,
                plan,
                shard,
                adam,
            });
        }
        if clients.is_empty() {
            return Err(Error::NoEligibleClients(format!(
                "all {} clients ineligible under strategy {}",
                cfg.num_clients,
                cfg.strategy.name()
            )));
        }
        let entries: Vec<_> = clients
            .iter()
            .map(|c| {
                (
                    c.spec.client_id,
                    &c.plan,
                    portions.as_slice(),
                    c.spec.devices.as_slice(),
                )
            })
            .collect();
        let ledger = build_ledger(&entries, &cfg.timing)?;
        let gen_adam = AdamState::new(&generator.network, cfg.lr);
        Ok(FedState {
            cfg,
            generator,
            discriminator,
            portions,
            gen_adam,
            clients,
            dataset,
            ledger,
            ineligible_client_ids: ineligible,
        })
    }

    pub fn eligible_client_ids(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.spec.client_id).collect()
    }

    /// One federation round: clients train split discriminator replicas on
    /// local data plus server-generated fakes, the server FedAvg-aggregates
    /// the replicas, then updates the generator against the aggregated
    /// discriminator.
    pub fn run_round(&mut self, epoch: usize) -> Result<RoundMetrics> {
        let cfg = &self.cfg;
        let broadcast = self.discriminator.network.serialize_params();
        let portions = &self.portions;
        let dataset = &self.dataset;
        let gen_template = &self.generator;
        let disc_template = &self.discriminator;

        // clients are independent given the broadcast; run them in parallel
        // and reduce in client order
        let outcomes: Vec<(ClientState, Result<(Vec<f64>, f64, usize)>)> = {
            let tasks: Vec<ClientState> = std::mem::take(&mut self.clients);
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                tasks
                    .into_par_iter()
                    .map(|mut c| {
                        let r = run_client_round(
                            cfg, epoch, &mut c, &broadcast, portions, dataset,
                            gen_template, disc_template,
                        );
                        (c, r)
                    })
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                tasks
                    .into_iter()
                    .map(|mut c| {
                        let r = run_client_round(
                            cfg, epoch, &mut c, &broadcast, portions, dataset,
                            gen_template, disc_template,
                        );
                        (c, r)
                    })
                    .collect()
            }
        };

        let mut clients = Vec::with_capacity(outcomes.len());
        let mut vectors = Vec::new();
        let mut weights = Vec::new();
        let mut d_losses = Vec::new();
        for (state, outcome) in outcomes {
            let (params, loss, samples) = outcome?;
            d_losses.push((state.spec.client_id, loss));
            vectors.push(params);
            weights.push(samples as f64);
            clients.push(state);
        }
        self.clients = clients;

        let averaged = fedavg(&vectors, &weights)?;
        self.discriminator.network.deserialize_params(&averaged)?;

        // server trains G against the freshly aggregated discriminator
        let mut g_total = 0.0;
        for s in 0..self.cfg.g_steps_per_round {
            let z = sample_latent(
                self.cfg.timing.batch_size,
                self.cfg.latent_dim,
                derive_seed(self.cfg.seed, TAG_GEN, epoch as u64, s as u64, 0),
            );
            g_total += generator_step(
                &mut self.generator,
                &mut self.discriminator,
                &z,
                &mut self.gen_adam,
            )?;
        }
        let g_loss = if self.cfg.g_steps_per_round > 0 {
            g_total / self.cfg.g_steps_per_round as f64
        } else {
            0.0
        };

        Ok(RoundMetrics {
            epoch,
            g_loss,
            d_losses,
            epoch_times: self
                .ledger
                .clients
                .iter()
                .map(|c| (c.client_id, c.total_time))
                .collect(),
            bottleneck_time: self.ledger.bottleneck_time,
            eligible_client_ids: self.eligible_client_ids(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn run_client_round(
    cfg: &FederationConfig,
    epoch: usize,
    client: &mut ClientState,
    broadcast: &[f64],
    portions: &[PortionSpec],
    dataset: &Dataset,
    gen_template: &Generator,
    disc_template: &Discriminator,
) -> Result<(Vec<f64>, f64, usize)> {
    let cid = client.spec.client_id as u64;
    let mut disc = disc_template.clone();
    disc.network.deserialize_params(broadcast)?;
    let mut gen = gen_template.clone();
    let reals = sample_batches(
        dataset,
        &client.shard,
        cfg.timing.batch_size,
        cfg.timing.batches_per_epoch,
        derive_seed(cfg.seed, TAG_DATA, epoch as u64, cid, 0),
    )?;
    let mut total = 0.0;
    for (b, real) in reals.iter().enumerate() {
        // fresh server-generated fakes per client per batch, detached
        let z = sample_latent(
            cfg.timing.batch_size,
            cfg.latent_dim,
            derive_seed(cfg.seed, TAG_FAKE, epoch as u64, cid, b as u64),
        );
        let fake = generate(&mut gen, &z)?;
        total += discriminator_step_split(
            &client.plan,
            portions,
            &mut disc,
            real,
            &fake,
            &mut client.adam,
        )?;
    }
    let samples = cfg.timing.batch_size * cfg.timing.batches_per_epoch;
    Ok((
        disc.network.serialize_params(),
        total / cfg.timing.batches_per_epoch.max(1) as f64,
        samples,
    ))
}

//! Partition a discriminator into contiguous layer portions and assign them
//! to a client's devices under the four selection strategies, enforcing
//! capacity and eligibility rules.

use std::fmt::Write as _;

use rand::Rng;

use crate::gan::{Discriminator, DISC_BLOCK_STARTS, IMAGE_SIZE};
use crate::layers::Layer;

/// Simulated compute/memory profile of one split-learning device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// Simulated seconds of compute per unit work; higher is slower.
    pub time_factor: f64,
    /// Memory budget in abstract memory units.
    pub capacity: f64,
}

/// A contiguous slice of discriminator layers with its work and memory cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PortionSpec {
    pub portion_id: usize,
    pub layer_range: std::ops::Range<usize>,
    /// Units of compute per sample, forward+backward combined.
    pub work: f64,
    /// Memory units: parameter count plus peak activation count at batch 1.
    pub mem: f64,
}

/// One client and its device pool.
#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub client_id: usize,
    pub devices: Vec<DeviceProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomSingle,
    RandomMultiple,
    SortedSingle,
    SortedMultiple,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::RandomSingle,
        Strategy::RandomMultiple,
        Strategy::SortedSingle,
        Strategy::SortedMultiple,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RandomSingle => "random_single",
            Strategy::RandomMultiple => "random_multiple",
            Strategy::SortedSingle => "sorted_single",
            Strategy::SortedMultiple => "sorted_multiple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerBlock,
    PerLayer,
}

/// Mapping of portions onto devices, in pipeline order.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    /// (portion_id, device_id) in portion order.
    pub assignments: Vec<(usize, usize)>,
    /// Adjacent portion pairs living on different devices.
    pub cut_count: usize,
}

impl AssignmentPlan {
    pub fn new(assignments: Vec<(usize, usize)>) -> Self {
        let cut_count = assignments
            .windows(2)
            .filter(|w| w[0].1 != w[1].1)
            .count();
        AssignmentPlan {
            assignments,
            cut_count,
        }
    }

    pub fn device_of(&self, portion_id: usize) -> Option<usize> {
        self.assignments
            .iter()
            .find(|(p, _)| *p == portion_id)
            .map(|(_, d)| *d)
    }

    /// Line-based text form `portion_id device_id`, one line per portion.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (p, d) in &self.assignments {
            let _ = writeln!(s, "{p} {d}");
        }
        s
    }
}

/// Outcome of a strategy run: a plan, or the client cannot host the model.
#[derive(Debug, Clone, PartialEq)]
pub enum AssignOutcome {
    Plan(AssignmentPlan),
    Ineligible,
}

impl AssignOutcome {
    pub fn plan(&self) -> Option<&AssignmentPlan> {
        match self {
            AssignOutcome::Plan(p) => Some(p),
            AssignOutcome::Ineligible => None,
        }
    }
}

fn layer_work(layer: &Layer, in_shape: &[usize], out_shape: &[usize]) -> f64 {
    // FLOP estimate per sample, x3 for forward+backward
    let fwd = match layer {
        Layer::Conv2d(l) => {
            2.0 * (l.kernel * l.kernel * l.in_channels * l.out_channels) as f64
                * (out_shape[2] * out_shape[3]) as f64
        }
        Layer::ConvTranspose2d(l) => {
            2.0 * (l.kernel * l.kernel * l.in_channels * l.out_channels) as f64
                * (in_shape[2] * in_shape[3]) as f64
        }
        Layer::Dense(l) => 2.0 * (l.in_features * l.out_features) as f64,
        Layer::BatchNorm2d(_) => 2.0 * out_shape[1..].iter().product::<usize>() as f64,
        Layer::Flatten(_) => 0.0,
        _ => out_shape[1..].iter().product::<usize>() as f64,
    };
    3.0 * fwd
}

/// Split the discriminator into contiguous portions with work/memory costs.
pub fn partition(disc: &Discriminator, granularity: Granularity) -> Vec<PortionSpec> {
    let input_shape = vec![1, 1, IMAGE_SIZE, IMAGE_SIZE];
    let shapes = disc.network.shape_walk(&input_shape);
    let ranges: Vec<std::ops::Range<usize>> = match granularity {
        Granularity::PerBlock => DISC_BLOCK_STARTS
            .windows(2)
            .map(|w| w[0]..w[1])
            .collect(),
        Granularity::PerLayer => (0..disc.network.len()).map(|i| i..i + 1).collect(),
    };
    ranges
        .into_iter()
        .enumerate()
        .map(|(portion_id, range)| {
            let mut work = 0.0;
            let mut params = 0usize;
            let in_elems = |i: usize| -> usize {
                if i == 0 {
                    input_shape[1..].iter().product()
                } else {
                    shapes[i - 1][1..].iter().product()
                }
            };
            // peak activation: portion input plus the largest layer output
            let mut peak_act = in_elems(range.start);
            for i in range.clone() {
                let in_shape = if i == 0 {
                    input_shape.clone()
                } else {
                    shapes[i - 1].clone()
                };
                let layer = &disc.network.layers[i];
                work += layer_work(layer, &in_shape, &shapes[i]);
                params += layer.param_count();
                peak_act = peak_act.max(shapes[i][1..].iter().product());
            }
            PortionSpec {
                portion_id,
                layer_range: range,
                work,
                mem: (params + peak_act) as f64,
            }
        })
        .collect()
}

fn sorted_device_order(devices: &[DeviceProfile]) -> Vec<usize> {
    // decreasing efficiency = capacity / time_factor, ties by lower device_id
    let mut idx: Vec<usize> = (0..devices.len()).collect();
    idx.sort_by(|&a, &b| {
        let ea = devices[a].capacity / devices[a].time_factor;
        let eb = devices[b].capacity / devices[b].time_factor;
        eb.partial_cmp(&ea)
            .unwrap()
            .then(devices[a].device_id.cmp(&devices[b].device_id))
    });
    idx
}

/// Assign portions to the client's devices under `strategy`.
///
/// Devices are visited without replacement: random strategies draw uniformly
/// from the remaining pool, sorted strategies visit in decreasing efficiency.
/// `single` places at most one portion per visited device; `multiple`
/// greedily packs consecutive portions while they fit. A device that cannot
/// take the next pending portion is discarded; if the pool is exhausted
/// before every portion is placed the client is ineligible.
pub fn assign<R: Rng>(
    strategy: Strategy,
    portions: &[PortionSpec],
    client: &ClientSpec,
    rng: &mut R,
) -> AssignOutcome {
    assert!(!portions.is_empty(), "portions must be nonempty");
    let order: Option<Vec<usize>> = match strategy {
        Strategy::SortedSingle | Strategy::SortedMultiple => {
            Some(sorted_device_order(&client.devices))
        }
        _ => None,
    };
    let multiple = matches!(strategy, Strategy::RandomMultiple | Strategy::SortedMultiple);

    let mut pool: Vec<usize> = match &order {
        Some(o) => o.clone(),
        None => (0..client.devices.len()).collect(),
    };
    let mut assignments: Vec<(usize, usize)> = Vec::with_capacity(portions.len());
    let mut next = 0usize;
    while next < portions.len() {
        if pool.is_empty() {
            return AssignOutcome::Ineligible;
        }
        let pick = match order {
            Some(_) => 0,
            None => rng.gen_range(0..pool.len()),
        };
        let device = &client.devices[pool.remove(pick)];
        let mut remaining = device.capacity;
        let mut placed = 0;
        while next < portions.len() && portions[next].mem <= remaining {
            assignments.push((portions[next].portion_id, device.device_id));
            remaining -= portions[next].mem;
            next += 1;
            placed += 1;
            if !multiple && placed == 1 {
                break;
            }
        }
    }
    AssignOutcome::Plan(AssignmentPlan::new(assignments))
}

/// A client participates only if the capacity-maximal greedy (sorted
/// multiple) can place the whole model on its pool.
pub fn is_eligible(client: &ClientSpec, portions: &[PortionSpec]) -> bool {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    matches!(
        assign(Strategy::SortedMultiple, portions, client, &mut rng),
        AssignOutcome::Plan(_)
    )
}

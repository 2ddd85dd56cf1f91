//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geoleak::fed::Encoder;
use geoleak::geo::{BBox, GridIndex};
use geoleak::model::{one_hot, Mlp, Model, ModelSpec};
use geoleak::network::{lattice, LatticeSpec};
use geoleak::RoadNetwork;

pub fn grid(g: usize) -> GridIndex {
    GridIndex::new(BBox::new(35.0, 35.03, 139.0, 139.03).expect("valid bbox"), g).expect("valid grid")
}

pub fn network(g: usize) -> RoadNetwork {
    lattice(&LatticeSpec {
        grid: grid(g),
        jitter: 0.2,
        keep_edge: 0.5,
        seed: 1,
    })
    .expect("lattice")
}

/// A batch-1 gradient of the default-size model and everything needed to
/// invert it.
pub struct InversionCase {
    pub model: Mlp,
    pub params: Vec<f64>,
    pub input: Vec<f64>,
    pub gradient: Vec<f64>,
    pub encoder: Encoder,
    pub net: RoadNetwork,
}

pub fn inversion_case(window: usize, hidden: usize, g: usize) -> InversionCase {
    let model = Mlp::new(ModelSpec::new(window, hidden, g * g).expect("valid spec"));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = model.init_params(&mut rng).0;
    let input: Vec<f64> = (0..2 * window).map(|_| rng.random_range(-0.9..0.9)).collect();
    let label = one_hot(rng.random_range(0..g * g), g * g);
    let gradient = model.param_grad(&params, &input, &label).expect("shapes match").0;
    InversionCase {
        model,
        params,
        input,
        gradient,
        encoder: Encoder { grid: grid(g), window },
        net: network(g),
    }
}

//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};


#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub worst_rel: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor makes coordinates whose
/// gradient is at the level of evaluation roundoff count by absolute error.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of [`relative_error`].
    pub floor: f64,
    pub coverage: Coverage,
    /// Also try both one-sided differences and keep the closest estimate.
    /// A top-k selection switch inside `[x - eps, x + eps]` puts a jump in
    /// the loss on one side only, which spoils the central difference alone.
    pub one_sided: bool,
}

/// Which coordinates of each parameter tensor to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many distinct coordinates per tensor, drawn with the seed.
    Sample { per_tensor: usize, seed: u64 },
}

/// Compares the tape gradient of `loss` against central differences for
/// every parameter in `store`. `loss` must build a scalar from a tape bound
/// to the store.
pub fn check_params<F>(store: &mut ParamStore, settings: &Settings, loss: F) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let l = loss(&mut tape)?;
    tape.backward(l)?;
    store.collect_grads(&tape)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, _, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference(store);
        let l = loss(&mut tape)?;
        tape.value(l).item()
    };

    let (eps, coverage) = (settings.eps, settings.coverage);
    let center = if settings.one_sided { Some(eval(store)?) } else { None };
    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => Some(Rng::new(seed)),
        Coverage::All => None,
    };
    let mut report = GradReport {
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let coords: Vec<usize> = match (&coverage, rng.as_mut()) {
            (Coverage::Sample { per_tensor, .. }, Some(r)) if *per_tensor < numel => {
                let mut all: Vec<usize> = (0..numel).collect();
                r.shuffle(&mut all);
                all.truncate(*per_tensor);
                all.sort_unstable();
                all
            }
            _ => (0..numel).collect(),
        };
        for j in coords {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let a = analytic[id.index()][j];
            let mut numeric = (plus - minus) / (2.0 * eps);
            let mut rel = relative_error(a, numeric, settings.floor);
            if let Some(f0) = center {
                for n in [(plus - f0) / eps, (f0 - minus) / eps] {
                    let r = relative_error(a, n, settings.floor);
                    if r < rel {
                        (numeric, rel) = (n, r);
                    }
                }
            }
            report.checked += 1;
            if rel > report.worst_rel || report.worst_param.is_empty() {
                report.worst_rel = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Module-level gradient scenarios at desk sizes.
pub mod suites {
    use super::{check_params, Coverage, GradReport, Settings};
    use crate::error::Result;
    use crate::loss;
    use crate::network::{self, ModelConfig, NetworkParams};
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::sagem::{self, SagemParams};
    use crate::salrm::{self, SalrmParams};
    use crate::superpixel::{self, GridGeometry, NeighborhoodSpec, SuperpixelParams};
    use crate::synthetic;
    use crate::tape::{Tape, Var};
    use crate::tensor::Tensor;

    pub const MODULE_TOL: f64 = 1e-4;
    pub const NETWORK_TOL: f64 = 1e-3;
    /// Relative-error floor: with the tolerance it allows an absolute error
    /// of `tol * FLOOR` on near-zero gradients.
    pub const FLOOR: f64 = 1e-5;
    pub const DEFAULT_EPS: f64 = 1e-5;
    /// Coordinates probed per parameter tensor in the full-network check.
    pub const NETWORK_COORDS: usize = 4;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Module {
        Superpixel,
        Sagem,
        Salrm,
        Loss,
        Network,
    }

    impl Module {
        pub const ALL: [Module; 5] = [Module::Superpixel, Module::Sagem, Module::Salrm, Module::Loss, Module::Network];

        pub fn name(self) -> &'static str {
            match self {
                Module::Superpixel => "superpixel",
                Module::Sagem => "sagem",
                Module::Salrm => "salrm",
                Module::Loss => "loss",
                Module::Network => "network",
            }
        }

        pub fn from_name(name: &str) -> Option<Module> {
            Module::ALL.into_iter().find(|m| m.name() == name)
        }

        pub fn tolerance(self) -> f64 {
            match self {
                Module::Network => NETWORK_TOL,
                _ => MODULE_TOL,
            }
        }
    }

    /// `sum(x * r)` for a fixed random `r`, so no coordinate cancels by symmetry.
    fn readout(tape: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
        let r = Tensor::uniform(tape.shape(x), -1.0, 1.0, rng);
        let r = tape.constant(r);
        let p = tape.mul(x, r)?;
        Ok(tape.sum(p))
    }

    const SIDE: usize = 4;
    const CELL: usize = 2;
    const C: usize = 3;

    fn features(rng: &mut Rng) -> Tensor {
        Tensor::uniform(&[SIDE * SIDE, C], -1.0, 1.0, rng)
    }

    pub fn run(module: Module, seed: u64, eps: f64) -> Result<GradReport> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let geo = GridGeometry::square(SIDE, CELL)?;
        let spec = NeighborhoodSpec::new(2, CELL);
        let all = Settings {
            eps,
            floor: FLOOR,
            coverage: Coverage::All,
            one_sided: false,
        };
        match module {
            Module::Superpixel => {
                let params = SuperpixelParams::new(&mut store, "sp", C, &mut rng);
                let x = features(&mut rng);
                let r = rng.next_u64();
                check_params(&mut store, &all, |t| {
                    let x = t.constant(x.clone());
                    let st = superpixel::generate(t, x, &geo, &spec, &params, 2)?;
                    let both = t.concat(&[st.s, st.p], 0)?;
                    readout(t, both, &mut Rng::new(r))
                })
            }
            Module::Sagem => {
                let params = SagemParams::new(&mut store, "g", C, &mut rng);
                let (fr, fd) = (features(&mut rng), features(&mut rng));
                let r = rng.next_u64();
                check_params(&mut store, &all, |t| {
                    let (a, b) = (t.constant(fr.clone()), t.constant(fd.clone()));
                    let (out, _) = sagem::sagem_forward(t, a, b, &params, &geo, &spec, 2)?;
                    readout(t, out, &mut Rng::new(r))
                })
            }
            Module::Salrm => {
                let params = SalrmParams::new(&mut store, "l", C, 4, &mut rng);
                let (fr, fd) = (features(&mut rng), features(&mut rng));
                let r = rng.next_u64();
                check_params(&mut store, &all, |t| {
                    let (a, b) = (t.constant(fr.clone()), t.constant(fd.clone()));
                    let (out, _) = salrm::salrm_forward(t, a, b, &params, &geo, &spec, 2)?;
                    readout(t, out, &mut Rng::new(r))
                })
            }
            Module::Loss => {
                let logits = store.add("logits", Tensor::uniform(&[SIDE, SIDE], -2.0, 2.0, &mut rng));
                let gt: Vec<f64> = (0..SIDE * SIDE).map(|_| f64::from(u8::from(rng.next_f64() < 0.5))).collect();
                let gt = Tensor::new(&[SIDE, SIDE], gt)?;
                check_params(&mut store, &all, |t| {
                    let s = t.param(logits);
                    let s = t.sigmoid(s);
                    let s2 = t.scale(s, 0.5);
                    Ok(loss::deep_supervision(t, &[s, s2], &gt)?.0)
                })
            }
            Module::Network => {
                let config = ModelConfig {
                    seed,
                    ..ModelConfig::tiny()
                };
                config.validate()?;
                let params = NetworkParams::new(&mut store, &config);
                let pair = synthetic::saliency_pair(config.input_size, &mut rng);
                let sampled = Settings {
                    coverage: Coverage::Sample {
                        per_tensor: NETWORK_COORDS,
                        seed: rng.next_u64(),
                    },
                    one_sided: true,
                    ..all
                };
                check_params(&mut store, &sampled, |t| {
                    let vars = network::forward(t, &config, &params, &pair.rgb, &pair.depth)?;
                    Ok(loss::deep_supervision(t, &vars.maps, &pair.gt)?.0)
                })
            }
        }
    }
}

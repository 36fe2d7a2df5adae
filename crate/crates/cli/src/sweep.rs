//! Sweep harness: one full permute -> perturb -> resync pipeline per
//! (param, seed) cell, emitted as CSV.
//!
//! Cells are independent and may run on several threads (capped by
//! `NWRS_THREADS`); rows are written in deterministic (kind, param, seed)
//! order regardless of completion order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, ValueEnum};

use nwrs_core::attack::{
    apply_perturbation, permute_layer, LayerTarget, PerturbationKind, PerturbationSpec,
};
use nwrs_core::model::error_rate;
use nwrs_core::resync::resync_model;
use nwrs_core::rng::{streams, CounterRng};
use nwrs_core::trainer::train_reference;
use nwrs_core::{Dataset, Error, ModelBundle, Permutation};

use crate::MethodArg;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Gauss,
    Quant,
    Prune,
    Finetune,
    Scalar,
}

impl SweepKind {
    fn label(self) -> &'static str {
        match self {
            SweepKind::Gauss => "gauss",
            SweepKind::Quant => "quant",
            SweepKind::Prune => "prune",
            SweepKind::Finetune => "finetune",
            SweepKind::Scalar => "scalar",
        }
    }

    fn perturbation(self, param: f64, layer: usize) -> Result<PerturbationSpec, Error> {
        let kind = match self {
            SweepKind::Gauss => PerturbationKind::GaussianNoise { omega: param },
            SweepKind::Quant => {
                if param < 1.0 || param.fract() != 0.0 {
                    return Err(Error::Domain(format!(
                        "quantization bits must be a positive integer, got {param}"
                    )));
                }
                PerturbationKind::Quantize { bits: param as u32 }
            }
            SweepKind::Prune => PerturbationKind::MagnitudePrune { t: param },
            SweepKind::Finetune => PerturbationKind::FineTune { theta: param },
            SweepKind::Scalar => PerturbationKind::ScalarMultiple {
                k: param,
                neuron: 0,
            },
        };
        Ok(PerturbationSpec {
            kind,
            target: LayerTarget::Index(layer),
        })
    }
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Comma-separated perturbation magnitudes.
    #[arg(long)]
    pub params: String,
    /// Number of seeded trials per magnitude.
    #[arg(long)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub base_seed: u64,
    /// Layer to permute and perturb; defaults to the penultimate layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub method: MethodArg,
    #[arg(long)]
    pub conv: bool,
    #[arg(long)]
    pub csv: String,
}

struct Cell {
    param: f64,
    seed: u64,
}

fn run_cell(
    args: &SweepArgs,
    cell: &Cell,
    model: &ModelBundle,
    data: &Dataset,
) -> Result<(f64, f64), Error> {
    let layer = args
        .layer
        .unwrap_or_else(|| model.depth().saturating_sub(2));
    let width = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Validation(format!("layer {layer} out of range")))?
        .output_units();
    let mut rng = CounterRng::new(args.base_seed.wrapping_add(cell.seed), streams::PERMUTE);
    let pi = Permutation::random(width, &mut rng);
    let permuted = permute_layer(model, layer, &pi)?;
    let spec = args.kind.perturbation(cell.param, layer)?;
    let perturbed = apply_perturbation(
        &permuted,
        &spec,
        args.base_seed.wrapping_add(cell.seed),
        Some(data),
    )?;
    let (fixed, report) = resync_model(model, &perturbed, args.method.into(), &[(layer, pi)])?;
    let psi = report
        .overall_psi
        .expect("evaluation mode always scores psi");
    let metric = error_rate(&fixed, data)?;
    Ok((psi, metric))
}

fn thread_cap() -> usize {
    std::env::var("NWRS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn run(args: &SweepArgs) -> Result<(), Error> {
    let params: Vec<f64> = args
        .params
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad parameter value {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    if params.is_empty() || args.seeds == 0 {
        return Err(Error::Validation(
            "need at least one param and one seed".into(),
        ));
    }

    // one trained model per seed, shared read-only by all cells
    let mut trained = Vec::with_capacity(args.seeds as usize);
    for s in 0..args.seeds {
        trained.push(train_reference(args.base_seed.wrapping_add(s), args.conv)?);
    }

    let cells: Vec<Cell> = params
        .iter()
        .flat_map(|&param| (0..args.seeds).map(move |seed| Cell { param, seed }))
        .collect();
    type CellOutcome = Option<Result<(f64, f64), Error>>;
    let results: Mutex<Vec<CellOutcome>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_cap().min(cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let cell = &cells[idx];
                let (model, data) = &trained[cell.seed as usize];
                let outcome = run_cell(args, cell, model, data);
                results.lock().expect("sweep results lock")[idx] = Some(outcome);
            });
        }
    });

    let mut csv = String::from("kind,param,seed,psi,metric\n");
    let collected = results.into_inner().expect("sweep results lock");
    for (cell, outcome) in cells.iter().zip(collected) {
        let (psi, metric) = outcome.expect("every cell visited")?;
        csv.push_str(&format!(
            "{},{:?},{},{psi:?},{metric:?}\n",
            args.kind.label(),
            cell.param,
            cell.seed
        ));
    }
    std::fs::write(&args.csv, csv)?;
    Ok(())
}

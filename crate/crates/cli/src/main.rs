//! Command-line front end: model generation, permutation and perturbation
//! attacks, re-synchronization, integrity verification, watermarking, KL
//! analysis and the sweep harness.
//!
//! Every failure exits nonzero with a single machine-parsable line on stderr:
//! `error: <category>: <detail>`.

mod sweep;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nwrs_core::attack::{
    add_gaussian_noise_with, apply_perturbation, permute_layer, LayerTarget, NoiseModel,
    PerturbationKind, PerturbationSpec,
};
use nwrs_core::container::{
    load_model, load_permutation, save_model, save_permutation, save_report,
};
use nwrs_core::integrity::{
    correct_scaled_neurons, kl_gaussian_scaled, kl_relu_scaled, mc, verify_integrity,
    IntegrityThresholds, NeuronFlag,
};
use nwrs_core::model::error_rate;
use nwrs_core::resync::resync_model;
use nwrs_core::rng::{streams, CounterRng};
use nwrs_core::trainer::train_reference;
use nwrs_core::watermark::{extract, WatermarkRecord};
use nwrs_core::{Error, MatchMethod, Permutation};

#[derive(Parser)]
#[command(
    name = "nwrs",
    version,
    about = "Neuron permutation, perturbation and re-synchronization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reference model on synthetic blobs and save it.
    GenModel(GenModelArgs),
    /// Apply a random neuron permutation to one layer.
    Permute(PermuteArgs),
    /// Apply a perturbation (gauss, quant, prune, finetune, scalar).
    Perturb(PerturbArgs),
    /// Re-synchronize a suspect model against a reference.
    Resync(ResyncArgs),
    /// Per-neuron norm verification; exit 0 clean, 2 scaled, 3 modified.
    Verify(VerifyArgs),
    /// Watermark embedding and extraction.
    #[command(subcommand)]
    Wm(WmCommand),
    /// Run a perturbation sweep and write one CSV row per (param, seed).
    Sweep(sweep::SweepArgs),
    /// Closed-form KL divergence of a scaled neuron plus its MC estimate.
    Kl(KlArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Build the convolutional reference instead of the MLP.
    #[arg(long)]
    conv: bool,
}

#[derive(Args)]
struct PermuteArgs {
    #[arg(long = "in")]
    input: String,
    /// Layer to permute; defaults to the penultimate layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: String,
    /// Where to save the applied permutation for later scoring.
    #[arg(long)]
    perm_out: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbKindArg {
    Gauss,
    Quant,
    Prune,
    Finetune,
    Scalar,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long = "in")]
    input: String,
    #[arg(long, value_enum)]
    kind: PerturbKindArg,
    /// Magnitude: omega, bits, fraction, theta percent, or k.
    #[arg(long, allow_negative_numbers = true)]
    param: f64,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neuron index for the scalar attack.
    #[arg(long, default_value_t = 0)]
    neuron: usize,
    /// Hit every layer instead of one (prune becomes global pruning).
    #[arg(long)]
    all_layers: bool,
    /// Read the gaussian parameter as a variance instead of a std multiplier.
    #[arg(long)]
    noise_variance: bool,
    #[arg(long)]
    out: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Greedy,
    Exact,
    Rowargmax,
}

impl From<MethodArg> for MatchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Greedy => MatchMethod::GreedyGlobal,
            MethodArg::Exact => MatchMethod::ExactAssignment,
            MethodArg::Rowargmax => MatchMethod::RowArgmax,
        }
    }
}

#[derive(Args)]
struct ResyncArgs {
    #[arg(long = "ref")]
    reference: String,
    #[arg(long)]
    suspect: String,
    #[arg(long, value_enum, default_value = "greedy")]
    method: MethodArg,
    /// Permutation file from `permute`; enables psi scoring.
    #[arg(long)]
    true_perm: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    report: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long = "ref")]
    reference: String,
    #[arg(long)]
    suspect: String,
    #[arg(long)]
    layer: usize,
    /// Rescale flagged neurons back and save the result to --out.
    #[arg(long)]
    correct: bool,
    #[arg(long)]
    out: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    cosine_eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    norm_eps: f64,
}

#[derive(Subcommand)]
enum WmCommand {
    /// Train a reference model with an embedded mark.
    Embed(WmEmbedArgs),
    /// Extract a mark; prints pearson and BER.
    Extract(WmExtractArgs),
}

#[derive(Args)]
struct WmEmbedArgs {
    #[arg(long)]
    out: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    conv: bool,
    /// Target layer; defaults to the last layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 64)]
    bits: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    projection_seed: u64,
    #[arg(long, default_value_t = 2)]
    bits_seed: u64,
    /// Verifier-side mark file (bits live here, never in the model).
    #[arg(long)]
    mark_out: String,
}

#[derive(Args)]
struct WmExtractArgs {
    #[arg(long = "in")]
    input: String,
    #[arg(long)]
    mark: String,
}

#[derive(Args)]
struct KlArgs {
    #[arg(long, allow_negative_numbers = true)]
    k: f64,
    /// ReLU-output divergence instead of the pre-activation Gaussian one.
    #[arg(long)]
    relu: bool,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn penultimate(depth: usize) -> usize {
    depth.saturating_sub(2)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenModel(args) => {
            let (model, data) = train_reference(args.seed, args.conv)?;
            let err = error_rate(&model, &data)?;
            save_model(&model, &args.out)?;
            eprintln!(
                "trained reference model (error {err:.2}%), wrote {}",
                args.out
            );
            Ok(0)
        }
        Command::Permute(args) => {
            let model = load_model(&args.input)?;
            let layer = args.layer.unwrap_or_else(|| penultimate(model.depth()));
            let width = model
                .layers
                .get(layer)
                .ok_or_else(|| Error::Validation(format!("layer {layer} out of range")))?
                .output_units();
            let mut rng = CounterRng::new(args.seed, streams::PERMUTE);
            let pi = Permutation::random(width, &mut rng);
            let permuted = permute_layer(&model, layer, &pi)?;
            save_model(&permuted, &args.out)?;
            if let Some(path) = &args.perm_out {
                save_permutation(path, layer, &pi, Some(args.seed))?;
            }
            eprintln!("permuted layer {layer}, wrote {}", args.out);
            Ok(0)
        }
        Command::Perturb(args) => {
            let model = load_model(&args.input)?;
            let layer = args.layer.unwrap_or_else(|| penultimate(model.depth()));
            let target = if args.all_layers {
                LayerTarget::All
            } else {
                LayerTarget::Index(layer)
            };
            let perturbed = match args.kind {
                PerturbKindArg::Gauss if args.noise_variance => {
                    if args.all_layers {
                        return Err(Error::Validation(
                            "variance-scaled noise supports a single layer".into(),
                        ));
                    }
                    add_gaussian_noise_with(
                        &model,
                        layer,
                        args.param,
                        args.seed,
                        NoiseModel::VarianceScaled,
                    )?
                }
                _ => {
                    let kind = match args.kind {
                        PerturbKindArg::Gauss => {
                            PerturbationKind::GaussianNoise { omega: args.param }
                        }
                        PerturbKindArg::Quant => {
                            if args.param < 1.0 || args.param.fract() != 0.0 {
                                return Err(Error::Domain(format!(
                                    "quantization bits must be a positive integer, got {}",
                                    args.param
                                )));
                            }
                            PerturbationKind::Quantize {
                                bits: args.param as u32,
                            }
                        }
                        PerturbKindArg::Prune => PerturbationKind::MagnitudePrune { t: args.param },
                        PerturbKindArg::Finetune => {
                            PerturbationKind::FineTune { theta: args.param }
                        }
                        PerturbKindArg::Scalar => {
                            if args.param == -1.0 {
                                eprintln!("warning: k = -1 zeroes the neuron (degenerate)");
                            }
                            PerturbationKind::ScalarMultiple {
                                k: args.param,
                                neuron: args.neuron,
                            }
                        }
                    };
                    let data = match kind {
                        PerturbationKind::FineTune { .. } => Some(
                            model
                                .metadata
                                .dataset
                                .clone()
                                .ok_or_else(|| {
                                    Error::Validation(
                                        "bundle metadata lacks a dataset spec for fine-tuning"
                                            .into(),
                                    )
                                })?
                                .realize()?,
                        ),
                        _ => None,
                    };
                    apply_perturbation(
                        &model,
                        &PerturbationSpec { kind, target },
                        args.seed,
                        data.as_ref(),
                    )?
                }
            };
            save_model(&perturbed, &args.out)?;
            Ok(0)
        }
        Command::Resync(args) => {
            let reference = load_model(&args.reference)?;
            let suspect = load_model(&args.suspect)?;
            let true_perms = match &args.true_perm {
                Some(path) => {
                    let file = load_permutation(path)?;
                    vec![(file.layer, file.permutation()?)]
                }
                None => Vec::new(),
            };
            let (fixed, report) =
                resync_model(&reference, &suspect, args.method.into(), &true_perms)?;
            for lr in &report.layers {
                if lr.ties > 0 {
                    eprintln!("warning: layer {}: {} matching ties", lr.layer, lr.ties);
                }
            }
            if let Some(psi) = report.overall_psi {
                println!("psi={psi:?}");
            }
            if let Some(path) = &args.out {
                save_model(&fixed, path)?;
            }
            if let Some(path) = &args.report {
                save_report(&report, path)?;
            }
            Ok(0)
        }
        Command::Verify(args) => {
            let reference = load_model(&args.reference)?;
            let suspect = load_model(&args.suspect)?;
            let thresholds = IntegrityThresholds {
                cosine_eps: args.cosine_eps,
                norm_eps: args.norm_eps,
            };
            let verdict = verify_integrity(&reference, &suspect, args.layer, &thresholds)?;
            println!("{}", serde_json::to_string_pretty(&verdict)?);
            if args.correct {
                let out = args.out.as_ref().ok_or_else(|| {
                    Error::Validation("--correct needs --out for the corrected model".into())
                })?;
                save_model(&correct_scaled_neurons(&suspect, &verdict)?, out)?;
            }
            Ok(match verdict.layer_verdict {
                NeuronFlag::Clean => 0,
                NeuronFlag::ScaledNeuron => 2,
                NeuronFlag::Modified => 3,
            })
        }
        Command::Wm(WmCommand::Embed(args)) => {
            let layers = if args.conv {
                nwrs_core::model::reference_conv_layers()
            } else {
                nwrs_core::model::reference_mlp_layers()
            };
            let input_shape = nwrs_core::model::reference_input_shape(args.conv);
            let dataset_spec = nwrs_core::model::reference_dataset_spec(args.seed, args.conv);
            let data = dataset_spec.realize()?;
            let init = nwrs_core::model::init_weights(&layers, &input_shape, args.seed)?;
            let target = args.layer.unwrap_or(layers.len() - 1);
            let record = WatermarkRecord::generate(
                &init,
                target,
                args.bits,
                args.projection_seed,
                args.bits_seed,
                args.lambda,
            )?;
            let cfg = nwrs_core::trainer::TrainConfig::reference(args.seed);
            let mut result = nwrs_core::watermark::embed(&init, &data, &cfg, &record)?;
            result.model.metadata.seed = args.seed;
            result.model.metadata.dataset = Some(dataset_spec);
            save_model(&result.model, &args.out)?;
            std::fs::write(&args.mark_out, serde_json::to_vec_pretty(&record)?)?;
            let check = extract(&result.model, &record)?;
            eprintln!(
                "embedded {} bits into layer {target} (ber {:?}, pearson {:.4}), wrote {}",
                args.bits, check.ber, check.pearson, args.out
            );
            Ok(0)
        }
        Command::Wm(WmCommand::Extract(args)) => {
            let model = load_model(&args.input)?;
            let record: WatermarkRecord = serde_json::from_slice(&std::fs::read(&args.mark)?)?;
            let extraction = extract(&model, &record)?;
            println!("pearson={:?}", extraction.pearson);
            println!("ber={:?}", extraction.ber);
            Ok(0)
        }
        Command::Sweep(args) => {
            sweep::run(&args)?;
            Ok(0)
        }
        Command::Kl(args) => {
            let (value, estimate) = if args.relu {
                (
                    kl_relu_scaled(args.k)?,
                    mc::kl_relu_scaled(args.k, args.samples, args.seed)?,
                )
            } else {
                (
                    kl_gaussian_scaled(args.k, args.mu, args.sigma)?,
                    mc::kl_gaussian_scaled(args.k, args.mu, args.sigma, args.samples, args.seed)?,
                )
            };
            println!("{value:?}");
            println!("mc={estimate:?}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let first = e.to_string();
                let line = first.lines().next().unwrap_or("invalid arguments");
                eprintln!("error: usage: {}", line.trim_start_matches("error: "));
                return ExitCode::from(1);
            }
            // --help / --version
            print!("{e}");
            return ExitCode::from(0);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

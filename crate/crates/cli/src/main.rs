use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use deltadct::checkpoint::DEFAULT_PASSTHROUGH_PATTERNS;
use deltadct::codec::format::MAGIC;
use deltadct::codec::RecordKind;
use deltadct::metrics::{self, FidelityReport, StorageReport};
use deltadct::{
    apply_archive, compress_checkpoint, load_checkpoint, read_archive, save_checkpoint, write_archive, BitPlan,
    CompressConfig, Method, RangeDtype, ZeroBitMode,
};

#[derive(Parser)]
#[command(name = "deltadct", version, about = "Compress fine-tuning deltas of safetensors checkpoints")]
struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dct,
    Sign,
    Svd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RangeArg {
    F32,
    F16,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZeroBitArg {
    SpatialMean,
    DctMean,
}

#[derive(Subcommand)]
enum Command {
    /// Compress `finetuned - base` into an archive and print its storage report.
    Compress {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        finetuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "dct")]
        method: MethodArg,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
        patch_size: u32,
        /// Comma-separated `bits:ratio` pairs.
        #[arg(long, default_value = "2:0.5,0:0.5", value_parser = parse_plan)]
        bits: BitPlan,
        #[arg(long, value_enum, default_value = "f32")]
        range_dtype: RangeArg,
        #[arg(long, value_enum, default_value = "spatial-mean")]
        zero_bit_mode: ZeroBitArg,
        /// Name substrings stored verbatim; replaces the default list.
        #[arg(long, num_args = 1.., default_values_t = DEFAULT_PASSTHROUGH_PATTERNS.iter().map(|s| s.to_string()))]
        passthrough: Vec<String>,
    },
    /// Rebuild the fine-tuned checkpoint from the base and an archive.
    Decompress {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the storage report of an archive.
    Inspect {
        #[arg(long)]
        delta: PathBuf,
    },
    /// Print reconstruction error of checkpoint `b` against checkpoint `a`.
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Write a value histogram of one tensor as CSV. Archives yield the
    /// reconstructed delta; checkpoints yield the stored values.
    Histogram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
        bins: u32,
        /// Lower edge; defaults to the minimum value.
        #[arg(long, requires = "hi", allow_hyphen_values = true)]
        lo: Option<f64>,
        /// Upper edge; defaults to the maximum value.
        #[arg(long, requires = "lo", allow_hyphen_values = true)]
        hi: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_plan(s: &str) -> Result<BitPlan, String> {
    s.parse::<BitPlan>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cmd {
        Command::Compress {
            base,
            finetuned,
            out: path,
            method,
            patch_size,
            bits,
            range_dtype,
            zero_bit_mode,
            passthrough,
        } => {
            let cfg = CompressConfig {
                patch_size: patch_size as usize,
                bit_plan: bits,
                range_dtype: match range_dtype {
                    RangeArg::F32 => RangeDtype::F32,
                    RangeArg::F16 => RangeDtype::F16,
                },
                zero_bit_mode: match zero_bit_mode {
                    ZeroBitArg::SpatialMean => ZeroBitMode::SpatialMean,
                    ZeroBitArg::DctMean => ZeroBitMode::DctMean,
                },
                passthrough_patterns: passthrough,
                method: match method {
                    MethodArg::Dct => Method::Dct,
                    MethodArg::Sign => Method::Sign,
                    MethodArg::Svd => Method::Svd,
                },
            };
            let base = load_checkpoint(&base)?;
            let ft = load_checkpoint(&finetuned)?;
            let archive = compress_checkpoint(&base, &ft, &cfg)?;
            write_archive(&archive, &path)?;
            print_storage(&mut out, &metrics::storage_report(&archive))?;
        }
        Command::Decompress { base, delta, out: path } => {
            let base = load_checkpoint(&base)?;
            let archive = read_archive(&delta)?;
            let rebuilt = apply_archive(&base, &archive)?;
            save_checkpoint(&rebuilt, &path)?;
            writeln!(out, "wrote {} tensors to {}", rebuilt.len(), path.display())?;
        }
        Command::Inspect { delta } => {
            let archive = read_archive(&delta)?;
            writeln!(
                out,
                "method {}  patch_size {}  bits {}  ranges {}  zero_bit_mode {}",
                archive.config.method.as_str(),
                archive.config.patch_size,
                archive.config.bit_plan,
                archive.config.range_dtype.as_str(),
                archive.config.zero_bit_mode.as_str()
            )?;
            print_storage(&mut out, &metrics::storage_report(&archive))?;
        }
        Command::Diff { a, b } => {
            let a = load_checkpoint(&a)?;
            let b = load_checkpoint(&b)?;
            let report = metrics::compare_checkpoints(&a, &b)?;
            for (name, r) in &report.tensors {
                print_fidelity(&mut out, name, r)?;
            }
            print_fidelity(&mut out, "total", &report.total)?;
        }
        Command::Histogram {
            input,
            tensor,
            bins,
            lo,
            hi,
            out: path,
        } => {
            let values = tensor_values(&input, &tensor)?;
            let range = lo.zip(hi);
            let hist = metrics::histogram(&values, bins as usize, range)?;
            let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
            let mut w = BufWriter::new(file);
            metrics::write_histogram_csv(&hist, &mut w)?;
            w.flush().with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn is_archive(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let n = io::Read::read(&mut f, &mut head)?;
    Ok(n == 4 && &head == MAGIC)
}

fn tensor_values(path: &Path, name: &str) -> Result<Vec<f32>> {
    if is_archive(path)? {
        let archive = read_archive(path)?;
        let rec = archive
            .get(name)
            .ok_or_else(|| deltadct::Error::UnknownTensor(name.to_string()))?;
        return Ok(match rec.reconstruct_delta()? {
            Some(m) => m.into_vec(),
            None => match rec {
                deltadct::ArchiveRecord::Passthrough { tensor, .. } => tensor.data.clone(),
                _ => bail!("tensor `{name}` has no values"),
            },
        });
    }
    let ckpt = load_checkpoint(path)?;
    let t = ckpt
        .get(name)
        .ok_or_else(|| deltadct::Error::UnknownTensor(name.to_string()))?;
    Ok(t.data.clone())
}

fn print_storage(out: &mut impl Write, report: &StorageReport) -> io::Result<()> {
    for e in &report.entries {
        if e.kind == RecordKind::Passthrough {
            writeln!(out, "{}  passthrough  {}  {} bytes stored", e.name, e.dtype.as_str(), e.payload_bits / 8)?;
        } else {
            writeln!(
                out,
                "{}  {}  {}  {:.3} bits/param (+{} bits/tensor)  alpha {:.6}",
                e.name,
                e.kind.as_str(),
                e.dtype.as_str(),
                e.bits_per_param(),
                e.scale_bits,
                e.alpha()
            )?;
        }
    }
    if report.compressed_params() > 0 {
        writeln!(
            out,
            "total  {:.3} bits/param (+32 bits/tensor)  alpha {:.6}  params {}",
            report.compressed_bits_per_param(),
            report.compressed_alpha(),
            report.compressed_params()
        )?;
    } else {
        writeln!(out, "total  no compressed tensors")?;
    }
    writeln!(
        out,
        "bytes  payload {}  ranges {}  scales {}  metadata {}  file {}",
        report.payload_bits() / 8,
        report.range_bits() / 8,
        report.scale_bits() / 8,
        (report.metadata_bits() + report.file_overhead_bits) / 8,
        report.total_bytes()
    )
}

fn print_fidelity(out: &mut impl Write, name: &str, r: &FidelityReport) -> io::Result<()> {
    writeln!(
        out,
        "{name}  rel_error {:.6e}  max_abs {:.6e}  mean_abs {:.6e}  cosine {:.9}",
        r.rel_error, r.max_abs_error, r.mean_abs_error, r.cosine
    )
}

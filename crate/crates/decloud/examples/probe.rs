//! Throwaway probe: direction check for the end-to-end acceptance criteria
//! at reduced iteration counts.

use std::time::Instant;

use candle_core::DType;
use decloud::bundle::{BundleSpec, DenoiserBundle};
use decloud::data::{split_dataset, synth_dataset, PairedDataset, SynthConfig};
use decloud::device;
use decloud::metrics::{evaluate_pairs, to_unit_scale};
use decloud::reference::{predict_reference, train_reference, ReferenceTrainConfig};
use decloud::sampler::{sample, SamplerConfig};
use decloud::training::{run_stage, Stage, StageConfig};
use decloud_core::batch::ImageBatch;

fn mean_psnr(outputs: &ImageBatch, truths: &ImageBatch) -> Result<f64, decloud::Error> {
    let ids: Vec<String> = (0..outputs.batch_len()).map(|i| format!("i{i}")).collect();
    let r = evaluate_pairs(&to_unit_scale(outputs), &to_unit_scale(truths), &ids, 1.0, None)?;
    Ok(r.mean_psnr)
}

fn main() -> Result<(), decloud::Error> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let ref_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let n_eval: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    println!("probe: {iters} iters/stage, {ref_iters} ref iters, lr {lr}, {n_eval} eval images");

    let device = device()?;
    let synth = SynthConfig {
        count: 240,
        image_size: 32,
        bands: 4,
        coverage: 0.5,
        ..Default::default()
    };
    let all = synth_dataset(&synth)?;
    let (train, test) = split_dataset(&all, 5.0 / 6.0, 17)?;
    println!("split: {} train / {} test", train.len(), test.len());

    let spec = BundleSpec::tiny(4);
    let mut bundle = DenoiserBundle::init(&spec, 7, DType::F32, &device)?;

    let t0 = Instant::now();
    let (cloudy, clear) = train.stacked()?;
    let ref_cfg = ReferenceTrainConfig {
        iterations: ref_iters,
        batch_size: 4,
        ..Default::default()
    };
    let losses = train_reference(bundle.reference.as_ref(), &cloudy, &clear, &device, &ref_cfg)?;
    println!(
        "reference {ref_iters} iters: {:.0}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        losses[0],
        losses.last().unwrap()
    );

    for (stage, size) in [(Stage::CnpSmall, 16usize), (Stage::WaFrozen, 32), (Stage::Joint, 32)] {
        let ds = train.resized(size)?;
        let (c, l) = ds.stacked()?;
        let cfg = StageConfig {
            stage,
            image_size: size,
            batch_size: 8,
            learning_rate: lr,
            iterations: iters,
            lambda: 1.0,
            seed: 1,
        };
        let t0 = Instant::now();
        let report = run_stage(&mut bundle, &c, &l, &cfg)?;
        println!(
            "{stage}: {:.0}s, {} iters{}, loss {:.4} -> {:.4}",
            t0.elapsed().as_secs_f64(),
            report.len(),
            if report.plateaued { " (plateaued)" } else { "" },
            report.total[0],
            report.total.last().unwrap()
        );
    }

    // Evaluation on the first n_eval test pairs.
    let eval = PairedDataset::new(test.samples()[..n_eval.min(test.len())].to_vec())?;
    let (ec, el) = eval.stacked()?;
    let x0e = predict_reference(bundle.reference.as_ref(), &ec, &device)?;
    println!("cloudy    PSNR: {:.2} dB", mean_psnr(&ec, &el)?);
    println!("reference PSNR: {:.2} dB", mean_psnr(&x0e, &el)?);

    let t0 = Instant::now();
    let mut outs = Vec::new();
    let mut first_w = 0.0;
    let mut last_w = 0.0;
    for (i, s) in eval.samples().iter().enumerate() {
        let scfg = SamplerConfig { seed: 100 + i as u64, ..Default::default() };
        let (out, rec) = sample(&bundle, &s.cloudy, &scfg)?;
        first_w += rec.mean_w[0] / eval.len() as f64;
        last_w += rec.mean_w.last().unwrap() / eval.len() as f64;
        outs.push(out);
    }
    let outs = ImageBatch::stack(&outs)?;
    println!(
        "DE        PSNR: {:.2} dB  ({:.0}s sampling)",
        mean_psnr(&outs, &el)?,
        t0.elapsed().as_secs_f64()
    );
    println!("mean W: first step {first_w:.4}, last step {last_w:.4}");
    Ok(())
}

//! End-to-end pipeline under one root seed: generate corpora, train the
//! denoiser and guidance classifier, translate source phantoms into
//! synthetic records, then score distribution distance, classification,
//! and segmentation. Every stage fans its randomness out from the root
//! seed by purpose label, so two runs with the same config produce
//! byte-identical metrics files.

use std::path::PathBuf;

use clap::Args;
use macdm::eval::{fid_images, train_downstream_classifier, FidSummary, RunProvenance};
use macdm::rng::derive_seed;
use macdm::sampling::translate_batch;
use macdm::training::{train_classifier, train_denoiser};
use macdm::{Error, MetricsReport, Result};

use crate::config::{parse_label, set, RunConfig};
use crate::manifest::{dataset_fingerprint, sha256_file, with_atomic_dir, Runner};

use super::{
    classify_conditions, save_dataset_output, save_extractor_checkpoint, segment_conditions,
    write_reports,
};

#[derive(Args, Debug)]
pub struct ReproAllArgs {
    /// Output directory for the whole pipeline; must not already exist.
    #[arg(long)]
    pub out: PathBuf,

    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Root seed (overrides config).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: ReproAllArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("repro-all", &cfg);
        let p = &cfg.phantom;
        let resolution = p.resolution;

        eprintln!(
            "stage 1/8: generating training corpus ({} normal, {} cml, {}px)",
            p.normal, p.cml, resolution
        );
        let train = macdm::phantom::generator::generate_corpus(
            p.normal,
            p.cml,
            resolution,
            derive_seed(cfg.seed, "phantom-train"),
        )?;
        let train_manifest = save_dataset_output(
            &mut runner,
            "train-data",
            tmp,
            "data/train",
            &train,
            resolution,
            derive_seed(cfg.seed, "phantom-train"),
        )?;

        eprintln!(
            "stage 2/8: generating test corpus ({} normal, {} cml)",
            p.test_normal, p.test_cml
        );
        let test = macdm::phantom::generator::generate_corpus(
            p.test_normal,
            p.test_cml,
            resolution,
            derive_seed(cfg.seed, "phantom-test"),
        )?;
        save_dataset_output(
            &mut runner,
            "test-data",
            tmp,
            "data/test",
            &test,
            resolution,
            derive_seed(cfg.seed, "phantom-test"),
        )?;

        eprintln!(
            "stage 3/8: training denoiser ({} iterations)",
            cfg.diffusion.iterations
        );
        let diffusion_dir = tmp.join("models/diffusion");
        std::fs::create_dir_all(&diffusion_dir)?;
        let trained_denoiser = train_denoiser(
            &train,
            &cfg.denoiser_arch(resolution),
            &cfg.diffusion_train(),
            Some(&diffusion_dir),
        )?;
        let denoiser_ckpt = diffusion_dir.join("denoiser.ckpt");
        let denoiser_sha = sha256_file(&denoiser_ckpt)?;
        runner.record_output(
            "denoiser",
            "models/diffusion/denoiser.ckpt",
            denoiser_sha.clone(),
        );
        runner.record_output(
            "denoiser-loss",
            "models/diffusion/denoiser-loss.csv",
            sha256_file(&diffusion_dir.join("denoiser-loss.csv"))?,
        );

        let target = parse_label(&cfg.translate.target)?;
        let guided = cfg.translate.gradient_scale > 0.0;
        let mut guidance_sha = None;
        let trained_guidance = if guided {
            eprintln!(
                "stage 4/8: training guidance classifier ({} iterations)",
                cfg.guidance_classifier.iterations
            );
            let guidance_dir = tmp.join("models/guidance");
            std::fs::create_dir_all(&guidance_dir)?;
            let trained = train_classifier(
                &train,
                &cfg.classifier_arch(resolution),
                &cfg.classifier_train(),
                Some(&guidance_dir),
            )?;
            let sha = sha256_file(&guidance_dir.join("classifier.ckpt"))?;
            runner.record_output(
                "guidance-classifier",
                "models/guidance/classifier.ckpt",
                sha.clone(),
            );
            runner.record_output(
                "guidance-loss",
                "models/guidance/classifier-loss.csv",
                sha256_file(&guidance_dir.join("classifier-loss.csv"))?,
            );
            guidance_sha = Some(sha);
            Some(trained)
        } else {
            eprintln!("stage 4/8: gradient-scale is 0; skipping guidance classifier");
            None
        };

        let mut sources: Vec<_> = train.iter().filter(|r| r.label != target).collect();
        if sources.is_empty() {
            return Err(Error::Dataset(format!(
                "training corpus has no source records to translate toward {target:?}"
            )));
        }
        if cfg.translate.count > 0 {
            sources.truncate(cfg.translate.count);
        }
        let inputs: Vec<_> = sources.into_iter().cloned().collect();
        eprintln!(
            "stage 5/8: translating {} source record(s) (start step {}, scale {})",
            inputs.len(),
            cfg.translate.start_step,
            cfg.translate.gradient_scale
        );
        let schedule = cfg.schedule_spec().build()?;
        let spec = cfg.guidance_spec(cfg.diffusion.weights)?;
        let results = translate_batch(
            &inputs,
            &trained_denoiser.denoiser,
            &trained_denoiser.params,
            trained_guidance
                .as_ref()
                .map(|t| (&t.classifier, t.params.as_slice())),
            &spec,
            &schedule,
            false,
        )?;
        let tag = cfg.translate.target.to_lowercase();
        let synthetic = results
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_labeled_triplet(format!("syn-{tag}-{i:04}")))
            .collect::<Result<Vec<_>>>()?;
        if synthetic.is_empty() {
            return Err(Error::Dataset(
                "translation produced no synthetic records".into(),
            ));
        }
        save_dataset_output(
            &mut runner,
            "synthetic-data",
            tmp,
            "data/synthetic",
            &synthetic,
            resolution,
            cfg.seed,
        )?;

        eprintln!("stage 6/8: training feature extractor and scoring distribution distance");
        let ecfg = cfg.eval_classifier_config("fid/extractor");
        let extractor = train_downstream_classifier(&train, &ecfg)?;
        let downstream_dir = tmp.join("models/downstream");
        let (_, extractor_sha) =
            save_extractor_checkpoint(&downstream_dir, &extractor.head, &extractor.params, &ecfg)?;
        runner.record_output(
            "extractor",
            "models/downstream/downstream-classifier.ckpt",
            extractor_sha.clone(),
        );
        let real_images: Vec<_> = test.iter().map(|r| r.image.clone()).collect();
        let synthetic_images: Vec<_> = synthetic.iter().map(|r| r.image.clone()).collect();
        let fid_value = fid_images(
            &real_images,
            &synthetic_images,
            &extractor.head,
            &extractor.params,
        )?;

        let mut provenance = RunProvenance {
            seed: cfg.seed,
            ..RunProvenance::default()
        };
        for (role, rel) in [
            ("train", "data/train"),
            ("test", "data/test"),
            ("synthetic", "data/synthetic"),
        ] {
            provenance
                .dataset_sha256
                .insert(role.into(), dataset_fingerprint(&tmp.join(rel))?);
        }
        provenance
            .checkpoint_sha256
            .insert("denoiser".into(), denoiser_sha);
        if let Some(sha) = guidance_sha {
            provenance
                .checkpoint_sha256
                .insert("guidance-classifier".into(), sha);
        }
        provenance
            .checkpoint_sha256
            .insert("extractor".into(), extractor_sha.clone());

        let mut reports = Vec::new();
        let mut fid_row = MetricsReport::new("fid", provenance.clone());
        fid_row.fid = Some(FidSummary {
            value: fid_value,
            extractor_sha256: extractor_sha,
        });
        reports.push(fid_row);

        eprintln!("stage 7/8: classification study");
        reports.extend(classify_conditions(
            &train,
            &train_manifest,
            Some(&synthetic),
            &test,
            &cfg,
            &provenance,
        )?);

        eprintln!("stage 8/8: segmentation study");
        reports.extend(segment_conditions(
            &train,
            Some(&synthetic),
            &test,
            &cfg,
            &provenance,
        )?);

        write_reports(&mut runner, tmp, &reports)?;
        Ok(runner)
    })
}

use std::collections::HashSet;

use msdm_core::image::RgbImage;
use msdm_core::metrics::{cosine, Embedder};
use msdm_core::synthdata::{
    all_attributes, augment, build_dataset, generate_paraphrases, original_prompts, paraphrase, render_prompt, render_scene,
    rim_color, split_holdout, DatasetConfig, DatasetManifest, Domain, Finding, Modality, Origin, SceneAttributes, Strategy,
};
use proptest::prelude::*;

fn attrs(finding: Finding, count: u8, modality: Modality, hue: u8) -> SceneAttributes {
    SceneAttributes { finding, count, modality, hue }
}

fn count_color(img: &RgbImage, c: [u8; 3]) -> usize {
    img.pixels.chunks(3).filter(|p| *p == c).count()
}

#[test]
fn clean_scenes_have_no_rims() {
    for a in all_attributes(Domain::Target, None).into_iter().chain(all_attributes(Domain::Generic, None)) {
        for seed in 0..20 {
            let img = render_scene(&a, seed);
            let rims = count_color(&img, rim_color(&a));
            match a.finding {
                Finding::Clean | Finding::Instrument => assert_eq!(rims, 0, "{}", a.key()),
                Finding::Polyp => assert!(rims > 0, "{} seed {seed}", a.key()),
            }
        }
    }
}

#[test]
fn rendering_is_deterministic() {
    let a = attrs(Finding::Polyp, 2, Modality::Endo, 1);
    assert_eq!(render_scene(&a, 9).encode_png().unwrap(), render_scene(&a, 9).encode_png().unwrap());
    assert_ne!(render_scene(&a, 9), render_scene(&a, 10));
}

#[test]
fn extra_polyp_changes_many_pixels() {
    for m in [Modality::Endo, Modality::Xray] {
        let mut total = 0usize;
        for seed in 0..100 {
            let one = render_scene(&attrs(Finding::Polyp, 1, m, 0), seed);
            let two = render_scene(&attrs(Finding::Polyp, 2, m, 0), seed);
            total += one.pixels.chunks(3).zip(two.pixels.chunks(3)).filter(|(a, b)| a != b).count();
        }
        assert!(total as f64 / 100.0 >= 40.0, "{m:?}: {}", total as f64 / 100.0);
    }
}

#[test]
fn prompt_examples() {
    let p = render_prompt(&attrs(Finding::Polyp, 1, Modality::Endo, 0), 0).unwrap();
    assert_eq!(p.text, "generate an image containing a polyp");
    for t in 0..16 {
        let q = render_prompt(&attrs(Finding::Instrument, 1, Modality::Endo, 0), t).unwrap();
        assert!(q.text.split_whitespace().any(|w| w == "forceps"), "{}", q.text);
    }
    assert_eq!(render_prompt(&p.attrs, 5).unwrap(), render_prompt(&p.attrs, 5).unwrap());
}

#[test]
fn paraphrase_expansion_scale() {
    let mut seen = HashSet::new();
    let base: Vec<_> = original_prompts(Domain::Target, None).into_iter().filter(|p| seen.insert(p.text.clone())).collect();
    assert!(base.len() >= 483, "{}", base.len());
    let base = &base[..483];
    let mut texts: HashSet<String> = base.iter().map(|p| p.text.clone()).collect();
    for p in base {
        let ps = paraphrase(p, 23, 1).unwrap();
        assert_eq!(ps.len(), 23);
        assert!(ps.iter().all(|q| q.attrs == p.attrs && q.origin == Origin::Paraphrase && q.text != p.text));
        texts.extend(ps.into_iter().map(|q| q.text));
    }
    assert!(texts.len() > 11_000, "{}", texts.len());
}

fn default_manifest() -> DatasetManifest {
    build_dataset(&DatasetConfig::default(), 42).unwrap()
}

#[test]
fn default_dataset_and_split() {
    let m = default_manifest();
    let idx = m.prompt_index();
    for im in &m.images {
        assert!((7..=14).contains(&im.prompt_ids.len()));
        assert!(im.prompt_ids.iter().all(|p| idx[p.as_str()].attrs == im.attrs));
    }
    let s = split_holdout(&m, 0.10, 5).unwrap();
    assert_eq!(s.split.validation.len(), 20);
    assert_eq!(s.split.train.len(), 180);
    let train: HashSet<_> = s.split.train.iter().collect();
    assert!(s.split.validation.iter().all(|v| !train.contains(v)));
    for pid in &s.split.validation_prompts {
        for im in &s.images {
            if im.prompt_ids.contains(pid) {
                assert!(s.split.validation.contains(&im.id));
            }
        }
    }
    assert_eq!(split_holdout(&m, 0.10, 5).unwrap(), s);

    let big = build_dataset(&DatasetConfig { n_images: 2000, ..Default::default() }, 1).unwrap();
    assert_eq!(split_holdout(&big, 0.10, 1).unwrap().split.validation.len(), 200);
}

#[test]
fn manifest_is_a_pure_function_of_seed() {
    let a = default_manifest().to_files().unwrap();
    let b = default_manifest().to_files().unwrap();
    assert_eq!(a, b);
    assert_ne!(build_dataset(&DatasetConfig::default(), 43).unwrap().to_files().unwrap(), a);
}

#[test]
fn manifest_round_trips_through_disk() {
    let m = split_holdout(&build_dataset(&DatasetConfig { n_images: 24, ..Default::default() }, 2).unwrap(), 0.1, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.write(dir.path()).unwrap();
    let back = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(back, m);
    let im = &m.images[3];
    assert_eq!(RgbImage::load_png(dir.path().join(&im.file)).unwrap(), im.render(32));
}

#[test]
fn augmentation_cardinalities() {
    let m = default_manifest();
    let originals = m.prompts.len();
    let m = generate_paraphrases(&m, 3, 7).unwrap();
    let paras = m.paraphrase_pool.len();
    assert_eq!(paras, 3 * originals);

    let add = augment(&m, Strategy::Add, 0.0, 1).unwrap();
    assert_eq!(add.prompts.len(), originals + paras);
    let rep = augment(&m, Strategy::Replace, 0.0, 1).unwrap();
    assert_eq!(rep.prompts.len(), paras);
    assert!(rep.prompts.iter().all(|p| p.origin == Origin::Paraphrase));
    let sub = augment(&m, Strategy::Substitute, 0.5, 1).unwrap();
    assert_eq!(sub.prompts.len(), originals);
    let swapped = sub.prompts.iter().filter(|p| p.origin == Origin::Paraphrase).count();
    assert_eq!(swapped, (0.5 * originals as f64).round() as usize);

    for out in [&add, &rep, &sub] {
        let idx = out.prompt_index();
        for im in &out.images {
            assert!(!im.prompt_ids.is_empty());
            assert!(im.prompt_ids.iter().all(|p| idx[p.as_str()].attrs == im.attrs));
        }
    }
    assert!(augment(&m, Strategy::Substitute, 1.5, 1).is_err());
    assert_eq!(Strategy::DEFAULT, Strategy::Add);
}

#[test]
fn substitute_swaps_exactly_half_of_a_hundred() {
    let mut m = default_manifest();
    m.prompts.truncate(100);
    let keep: HashSet<String> = m.prompts.iter().map(|p| p.id.clone()).collect();
    for im in m.images.iter_mut() {
        im.prompt_ids.retain(|p| keep.contains(p));
    }
    let m = generate_paraphrases(&m, 2, 3).unwrap();
    let sub = augment(&m, Strategy::Substitute, 0.5, 9).unwrap();
    assert_eq!(sub.prompts.iter().filter(|p| p.origin == Origin::Paraphrase).count(), 50);
    assert_eq!(sub.prompts.len(), 100);
}

#[test]
fn embedder_properties() {
    let e = Embedder::random_projection(1);
    let a = render_scene(&attrs(Finding::Polyp, 3, Modality::Endo, 0), 1);
    let b = render_scene(&attrs(Finding::Instrument, 1, Modality::Xray, 2), 1);
    let (ea, eb) = (e.embed(&a).unwrap(), e.embed(&b).unwrap());
    assert_eq!(ea, e.embed(&a.clone()).unwrap());
    for v in [&ea, &eb] {
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    assert!(cosine(&ea, &eb) < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn paraphrases_keep_attributes(i in 0usize..672, k in 1usize..30, seed in 0u64..1000) {
        let p = &original_prompts(Domain::Target, None)[i];
        for q in paraphrase(p, k, seed).unwrap() {
            prop_assert_eq!(q.attrs, p.attrs);
            prop_assert_eq!(q.parent_id.as_deref(), Some(p.id.as_str()));
        }
    }

    #[test]
    fn splits_never_leak(n in 20usize..120, frac in 0.05f64..0.5, seed in 0u64..1000) {
        let m = build_dataset(&DatasetConfig { n_images: n, ..Default::default() }, seed).unwrap();
        let s = split_holdout(&m, frac, seed).unwrap();
        let train: HashSet<_> = s.split.train.iter().collect();
        prop_assert!(s.split.validation.iter().all(|v| !train.contains(v)));
        prop_assert_eq!(s.split.train.len() + s.split.validation.len(), n);
    }
}

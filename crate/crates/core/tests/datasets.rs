use lanegan::config::SynthPlan;
use lanegan::datasets::{
    load_train_list, parse_lines_file, render_scene, synth_generate, CategoryIndex, LightDomain, SyntheticSceneConfig,
};
use lanegan::experiments::synth_data;
use lanegan::imaging::load_image;

fn scene(light: LightDomain, seed: u64) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        light,
        seed,
        ..SyntheticSceneConfig::default()
    }
}

#[test]
fn rendering_is_seeded() {
    let a = render_scene(&scene(LightDomain::Bright, 7), 3);
    assert_eq!(a, render_scene(&scene(LightDomain::Bright, 7), 3));
    assert_ne!(a.image, render_scene(&scene(LightDomain::Bright, 8), 3).image);
}

#[test]
fn dark_scenes_are_darker_with_the_same_lanes() {
    let (mut bright, mut dark) = (0.0, 0.0);
    for i in 0..20 {
        let b = render_scene(&scene(LightDomain::Bright, 1), i);
        let d = render_scene(&scene(LightDomain::Dark, 1), i);
        assert_eq!(b.seg, d.seg);
        bright += b.image.mean_luminance();
        dark += d.image.mean_luminance();
    }
    assert!(dark < 0.5 * bright, "dark {dark} vs bright {bright}");
}

#[test]
fn generated_files_agree_with_the_list() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&scene(LightDomain::Dark, 3), 6, dir.path()).unwrap();
    assert_eq!(ds.len(), 6);
    let list = load_train_list(&dir.path().join("list.txt"), 4).unwrap();
    assert_eq!(list.len(), 6);
    for e in &list {
        let img = load_image(&e.image).unwrap();
        assert_eq!(img.dims(), (64, 128));
        let ann = parse_lines_file(&e.image.with_extension("lines.txt")).unwrap();
        let flags = e.existence.as_ref().unwrap();
        assert_eq!(ann.lanes.len(), flags.iter().filter(|&&f| f == 1).count());
    }
    let idx = CategoryIndex::load(&dir.path().join("index.txt")).unwrap();
    assert!(idx.entries.iter().all(|e| e.1 == "Night"));
}

#[test]
fn synth_data_is_reproducible_and_indexed() {
    let plan = SynthPlan {
        train: 4,
        val: 2,
        dark_pool: 3,
        test_normal: 2,
        test_night: 3,
        test_crossroad: 1,
        ..SynthPlan::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let splits = synth_data(&plan, 9, a.path()).unwrap();
    synth_data(&plan, 9, b.path()).unwrap();
    assert_eq!(splits.iter().map(|s| s.1).sum::<usize>(), 15);
    for rel in ["train/images/00000.png", "test/night/images/00002.png", "dark_pool/images/00001.png"] {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
    let idx = CategoryIndex::load(&a.path().join("test/index.txt")).unwrap();
    let mut cats: Vec<&str> = idx.entries.iter().map(|e| e.1.as_str()).collect();
    cats.dedup();
    assert_eq!(cats, ["Normal", "Night", "Crossroad"]);
    let cross = parse_lines_file(&a.path().join("test/crossroad/images/00000.lines.txt")).unwrap();
    assert!(cross.lanes.is_empty());
}

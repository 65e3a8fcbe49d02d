use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorgraph_core::autodiff::{lr_at_epoch, AdamW, AdamWConfig, Checkpoint, Parameter, Tensor};
use tumorgraph_core::gnn::{train_gnn, Gnn, GnnConfig};
use tumorgraph_core::graph::{build_graph, BrainGraph};
use tumorgraph_core::nifti::{read_nifti, write_nifti, DataType, NiftiHeader};
use tumorgraph_core::phantom::{generate_dataset, generate_phantom, PhantomSpec};
use tumorgraph_core::supervoxel::{slic_partition, SlicParams};
use tumorgraph_core::volume::{load_case, preprocess, read_manifest, CasePaths, Split};
use tumorgraph_core::Dims;

#[test]
fn lr_schedule_matches_repeated_multiplication() {
    let mut expected = 0.0005f64;
    let mut prev = f64::INFINITY;
    for e in 0..=300 {
        let lr = lr_at_epoch(0.0005, 0.98, e);
        assert!((lr - expected).abs() <= 1e-12, "epoch {e}");
        assert!(lr < prev);
        prev = lr;
        expected *= 0.98;
    }
}

#[test]
fn adamw_matches_the_textbook_update() {
    let cfg = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
    let opt = AdamW::new(cfg);
    let mut p = Parameter::new("p", Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap());
    let grads = [[0.1, -0.3, 2.0], [0.2, 0.1, -1.0], [-0.5, 0.0, 0.3]];
    let (mut theta, mut m, mut v) = ([1.0f64, -2.0, 0.5], [0.0f64; 3], [0.0f64; 3]);
    let lr = 0.01;
    for (t, g) in grads.iter().enumerate() {
        opt.step(&mut p, &Tensor::new(vec![3], g.to_vec()).unwrap(), lr).unwrap();
        let t = t as i32 + 1;
        for i in 0..3 {
            theta[i] -= lr * cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        for i in 0..3 {
            assert!((p.value.data()[i] - theta[i]).abs() < 1e-12);
        }
    }
    assert_eq!(p.step, 3);
}

fn phantom_graphs(n: usize) -> Vec<BrainGraph> {
    let spec = PhantomSpec { shape: [32; 3], tumor_radius: [4.0, 6.0], ..PhantomSpec::default() };
    (0..n as u64)
        .map(|s| {
            let (v, l) = generate_phantom(&spec, s).unwrap();
            let (v, l) = preprocess(&v, Some(&l), None).unwrap();
            let p = slic_partition(&v, &SlicParams { k: 300, m: 0.5, max_iter: 5 }).unwrap();
            build_graph(&v, &p, l.as_ref()).unwrap()
        })
        .collect()
}

#[test]
fn gnn_training_is_reproducible_and_checkpoints_roundtrip() {
    let graphs = phantom_graphs(3);
    let cfg = GnnConfig { depth: 2, hidden: 16, epochs: 4, seed: 9, ..GnnConfig::default() };
    let mut epochs = Vec::new();
    let (a, trace_a) = train_gnn(&graphs, &cfg, |r| epochs.push(r.epoch)).unwrap();
    let (b, trace_b) = train_gnn(&graphs, &cfg, |_| {}).unwrap();
    assert_eq!(epochs, vec![0, 1, 2, 3]);
    assert_eq!(trace_a, trace_b);
    assert_eq!(a, b);
    assert!(trace_a.iter().all(|l| l.is_finite()));

    let bytes = a.to_checkpoint(4).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.epoch, 4);
    let restored = Gnn::from_checkpoint(&ck).unwrap();
    assert_eq!(restored, a);
    assert_eq!(restored.to_checkpoint(4).to_bytes(), bytes);
    assert_eq!(restored.predict(&graphs[0]).unwrap(), a.predict(&graphs[0]).unwrap());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn nifti_roundtrip_for_every_datatype() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims([5, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let header = NiftiHeader::new(dims, [1.0, 1.5, 2.5], DataType::F32);
    for (dt, name) in [(DataType::U8, "a.nii"), (DataType::I16, "b.nii.gz"), (DataType::F32, "c.nii.gz")] {
        let data: Vec<f32> = (0..dims.len())
            .map(|_| match dt {
                DataType::U8 => rng.gen_range(0..=255) as f32,
                DataType::I16 => rng.gen_range(-3000..3000) as f32,
                DataType::F32 => rng.gen_range(-1.0..1.0),
            })
            .collect();
        let path = dir.path().join(name);
        write_nifti(&path, &header, dims, dt, &data).unwrap();
        let img = read_nifti(&path).unwrap();
        assert_eq!(img.header.dims(), dims);
        assert_eq!(img.header.spacing(), [1.0, 1.5, 2.5]);
        assert_eq!(img.header.datatype(), Some(dt));
        assert_eq!(img.data, data);
    }
    std::fs::write(dir.path().join("bad.nii"), b"not a nifti").unwrap();
    assert!(read_nifti(&dir.path().join("bad.nii")).is_err());
}

#[test]
fn generated_dataset_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { shape: [24; 3], tumor_radius: [3.0, 4.0], ..PhantomSpec::default() };
    let entries = generate_dataset(&spec, dir.path(), 2, 1, 77).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), entries);
    assert_eq!(entries.iter().filter(|e| e.1 == Split::Val).count(), 1);

    let again = tempfile::tempdir().unwrap();
    generate_dataset(&spec, again.path(), 2, 1, 77).unwrap();
    for (id, _) in &entries {
        let paths = CasePaths::new(dir.path(), id);
        let (v, l) = load_case(&paths.images, Some(&paths.label)).unwrap();
        let l = l.unwrap();
        assert_eq!(v.dims, Dims([24; 3]));
        assert!(l.labels.iter().any(|&c| c != 0));
        assert!(l.labels.iter().zip(&v.brain_mask).all(|(&c, &b)| c == 0 || b));
        let other = CasePaths::new(again.path(), id);
        for (p, q) in paths.images.iter().zip(&other.images) {
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
        }
    }
}

#[test]
fn phantom_regions_are_nested() {
    let spec = PhantomSpec { shape: [40; 3], ..PhantomSpec::default() };
    for seed in 0..5 {
        let (_, l) = generate_phantom(&spec, seed).unwrap();
        let dims = l.dims;
        let count = |c: u8| l.labels.iter().filter(|&&v| v == c).count();
        assert!(count(1) > 0 && count(2) > 0 && count(3) > 0, "seed {seed}");
        // Every enhancing voxel is surrounded by tumour, never by healthy
        // tissue directly.
        for (i, &c) in l.labels.iter().enumerate() {
            if c == 3 {
                dims.for_each_face_neighbor(i, |j| assert_ne!(l.labels[j], 0, "seed {seed}"));
            }
        }
    }
}

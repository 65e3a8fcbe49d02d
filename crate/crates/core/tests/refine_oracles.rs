use proptest::prelude::*;

use tumorgraph_core::autodiff::Tensor;
use tumorgraph_core::refine::{
    merge_predictions, patch_input, reproject_logits, tumor_patch, Cnn, CnnConfig, LogitVolume, PatchBounds,
    BACKGROUND_LOGITS, CNN_IN,
};
use tumorgraph_core::supervoxel::{PartitionMeta, SupervoxelPartition};
use tumorgraph_core::volume::{LabelVolume, MultiModalVolume};
use tumorgraph_core::Dims;

const META: PartitionMeta = PartitionMeta { k: 0, m: 0.5, grid_step: 1.0, iterations: 0, seed: 0 };

fn partition(dims: Dims, assignment: Vec<i32>) -> SupervoxelPartition {
    SupervoxelPartition::from_assignment(dims, assignment, &META).unwrap()
}

#[test]
fn reprojection_paints_node_logits() {
    let dims = Dims([4, 3, 2]);
    let assignment: Vec<i32> = (0..24).map(|i| if i % 5 == 0 { -1 } else { i % 3 }).collect();
    let p = partition(dims, assignment.clone());
    let logits: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect();
    let lv = reproject_logits(&logits, &p).unwrap();
    for (i, &a) in assignment.iter().enumerate() {
        let expect: [f32; 4] = if a < 0 {
            BACKGROUND_LOGITS
        } else {
            std::array::from_fn(|c| logits[a as usize * 4 + c])
        };
        assert_eq!(lv.logits_at(i), expect);
    }
    assert!(reproject_logits(&logits[..8], &p).is_err());
    assert_eq!(LogitVolume::from_bytes(&lv.to_bytes()).unwrap(), lv);
}

fn logit_volume_from_labels(dims: Dims, labels: &[u8]) -> LogitVolume {
    let n = dims.len();
    let mut data = vec![0.0; 4 * n];
    for (i, &l) in labels.iter().enumerate() {
        data[l as usize * n + i] = 5.0;
    }
    LogitVolume { dims, data }
}

#[test]
fn patch_is_the_grown_tumour_box() {
    let dims = Dims([20, 18, 16]);
    let mut labels = vec![0u8; dims.len()];
    labels[dims.index(5, 6, 7)] = 2;
    labels[dims.index(9, 10, 8)] = 1;
    let lv = logit_volume_from_labels(dims, &labels);
    let b = tumor_patch(&lv, 3).unwrap();
    assert_eq!(b, PatchBounds { lo: [2, 3, 4], hi: [13, 14, 12] });
    let b = tumor_patch(&lv, 10).unwrap();
    assert_eq!(b, PatchBounds { lo: [0, 0, 0], hi: [20, 18, 16] });
    assert!(tumor_patch(&logit_volume_from_labels(dims, &vec![0; dims.len()]), 3).is_none());
}

#[test]
fn patch_input_stacks_logits_then_image() {
    let dims = Dims([6, 5, 4]);
    let n = dims.len();
    let lv = LogitVolume { dims, data: (0..4 * n).map(|v| v as f32).collect() };
    let image = MultiModalVolume::from_channels(dims, (0..4 * n).map(|v| -(v as f32) - 1.0).collect(), [1.0; 3]).unwrap();
    let b = PatchBounds { lo: [1, 2, 0], hi: [4, 5, 2] };
    let t = patch_input(&lv, &image, &b).unwrap();
    assert_eq!(t.shape(), &[CNN_IN, 2, 3, 3]);
    let p = b.len();
    let mut k = 0;
    for z in 0..2 {
        for y in 2..5 {
            for x in 1..4 {
                let i = dims.index(x, y, z);
                for c in 0..4 {
                    assert_eq!(t.data()[c * p + k], lv.channel(c)[i]);
                    assert_eq!(t.data()[(4 + c) * p + k], image.channel(c)[i]);
                }
                k += 1;
            }
        }
    }
}

#[test]
fn untrained_cnn_output_shape() {
    let cnn = Cnn::<f32>::init(&CnnConfig::default()).unwrap();
    let logits = Tensor::zeros(&[4, 3, 5, 7]);
    let image = Tensor::zeros(&[4, 3, 5, 7]);
    assert_eq!(cnn.forward(&logits, &image).unwrap().shape(), &[4, 3, 5, 7]);
    assert!(cnn.forward(&logits, &Tensor::zeros(&[4, 3, 5, 6])).is_err());
}

proptest! {
    #[test]
    fn merge_only_changes_the_patch(
        lo in (0usize..5, 0usize..4, 0usize..3),
        ext in (1usize..4, 1usize..4, 1usize..3),
        seed in any::<u64>(),
    ) {
        let dims = Dims([8, 7, 5]);
        let b = PatchBounds {
            lo: [lo.0, lo.1, lo.2],
            hi: [(lo.0 + ext.0).min(8), (lo.1 + ext.1).min(7), (lo.2 + ext.2).min(5)],
        };
        let gnn = LabelVolume::new(dims, (0..dims.len()).map(|i| ((i as u64 ^ seed) % 4) as u8).collect()).unwrap();
        let brain: Vec<bool> = (0..dims.len()).map(|i| !(i as u64).wrapping_mul(seed | 1).is_multiple_of(7)).collect();
        let p = b.len();
        let logits = Tensor::from_fn(&[4, p], |j| ((j as u64).wrapping_mul(seed.rotate_left(7) | 1) % 11) as f32);
        let merged = merge_predictions(&gnn, Some(&logits), Some(&b), &brain).unwrap();
        for i in 0..dims.len() {
            if !b.contains(dims.coords(i)) {
                prop_assert_eq!(merged.labels[i], gnn.labels[i]);
            } else if !brain[i] {
                prop_assert_eq!(merged.labels[i], 0);
            }
        }
        prop_assert_eq!(merge_predictions(&gnn, None, None, &brain).unwrap(), gnn);
    }
}

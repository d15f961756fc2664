//! Synthetic labelled frame sequences and their on-disk record format.

mod records;
mod synth;

use std::collections::BTreeSet;

pub use records::{
    example_checksum, manifest_path, read_manifest, read_records, write_manifest, write_records, Manifest,
    RecordReader, RECORD_MAGIC, RECORD_VERSION,
};
pub use synth::{generate, DatasetSpec, SyntheticWorld};

use crate::error::Result;
use crate::heads::Taxonomy;
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;

/// One labelled video: per-frame visual and audio features plus its fine
/// labels. Coarse labels are always derived through a [`Taxonomy`].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoExample {
    pub id: String,
    pub visual: Tensor,
    pub audio: Tensor,
    pub fine_labels: BTreeSet<usize>,
}

impl VideoExample {
    pub fn frames(&self) -> usize {
        self.visual.rows()
    }

    pub fn coarse_labels(&self, taxonomy: &Taxonomy) -> Result<BTreeSet<usize>> {
        taxonomy.coarse_labels(&self.fine_labels)
    }

    /// Keeps at most the first `max_frames` frames.
    pub fn truncated(&self, max_frames: usize) -> VideoExample {
        let t = self.frames();
        if t <= max_frames {
            return self.clone();
        }
        let cut = |m: &Tensor| {
            let c = m.cols();
            Tensor::new(vec![max_frames, c], m.data()[..max_frames * c].to_vec()).unwrap()
        };
        VideoExample {
            id: self.id.clone(),
            visual: cut(&self.visual),
            audio: cut(&self.audio),
            fine_labels: self.fine_labels.clone(),
        }
    }
}

/// Binary indicator vector over `classes` entries.
pub fn indicator(labels: &BTreeSet<usize>, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    for &l in labels {
        t.data_mut()[l] = 1.0;
    }
    t
}

pub fn ground_truth(examples: &[VideoExample]) -> GroundTruth {
    examples.iter().map(|e| (e.id.clone(), e.fine_labels.clone())).collect()
}

/// Number of occurrences of each fine class.
pub fn label_counts(examples: &[VideoExample], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for e in examples {
        for &l in &e.fine_labels {
            if l < classes {
                counts[l] += 1;
            }
        }
    }
    counts
}

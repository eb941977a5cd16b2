use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    /// `(B, heads, N, X)` tensors; one group per head.
    HeadWise,
    /// Channels of the last axis split into contiguous spans.
    ChannelGroup,
    /// The whole tensor is one group.
    LayerWise,
}

/// Partition of a tensor's elements into quantization groups.
///
/// With `per_sample` set, each group is further split along the leading
/// (batch) axis, giving `B * G` groups numbered `sample * G + group`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    kind: LayoutKind,
    groups: usize,
    shape: Vec<usize>,
    per_sample: bool,
}

/// A contiguous run of elements that all belong to one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub start: usize,
    pub len: usize,
    pub group: usize,
}

impl GroupLayout {
    pub fn head_wise(shape: &[usize]) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::Layout(format!(
                "head-wise layout needs a (B, heads, N, X) tensor, got {shape:?}"
            )));
        }
        Self::checked(LayoutKind::HeadWise, shape[1], shape)
    }

    pub fn channel_group(shape: &[usize], groups: usize) -> Result<Self> {
        let channels = shape.last().copied().unwrap_or(0);
        if groups == 0 || groups > channels {
            return Err(Error::Layout(format!(
                "cannot split {channels} channels into {groups} non-empty groups"
            )));
        }
        Self::checked(LayoutKind::ChannelGroup, groups, shape)
    }

    pub fn layer_wise(shape: &[usize]) -> Result<Self> {
        Self::checked(LayoutKind::LayerWise, 1, shape)
    }

    fn checked(kind: LayoutKind, groups: usize, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || groups == 0 {
            return Err(Error::Layout(format!(
                "invalid shape {shape:?} for {kind:?}"
            )));
        }
        Ok(GroupLayout {
            kind,
            groups,
            shape: shape.to_vec(),
            per_sample: false,
        })
    }

    /// Splits every group by sample (leading axis).
    pub fn per_sample(mut self) -> Self {
        self.per_sample = true;
        self
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn is_per_sample(&self) -> bool {
        self.per_sample
    }

    /// Groups within one sample (the `G` of the layout).
    pub fn groups_per_sample(&self) -> usize {
        self.groups
    }

    pub fn group_count(&self) -> usize {
        if self.per_sample {
            self.shape[0] * self.groups
        } else {
            self.groups
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if shape != self.shape.as_slice() {
            return Err(Error::Layout(format!(
                "layout built for {:?} applied to {shape:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn channels(&self) -> usize {
        *self.shape.last().unwrap()
    }

    fn channel_span(&self, channel: usize) -> usize {
        channel * self.groups / self.channels()
    }

    /// Group id of the element at flat row-major index `idx`.
    pub fn group_of(&self, idx: usize) -> usize {
        let g = match self.kind {
            LayoutKind::LayerWise => 0,
            LayoutKind::HeadWise => {
                let per_head = self.shape[2] * self.shape[3];
                (idx / per_head) % self.groups
            }
            LayoutKind::ChannelGroup => self.channel_span(idx % self.channels()),
        };
        if self.per_sample {
            let sample = idx / (self.numel() / self.shape[0]);
            sample * self.groups + g
        } else {
            g
        }
    }

    /// Contiguous same-group runs covering the tensor in order.
    pub fn runs(&self) -> Vec<Run> {
        let n = self.numel();
        let sample_len = n / self.shape[0];
        let offset = |start: usize, g: usize| {
            if self.per_sample {
                (start / sample_len) * self.groups + g
            } else {
                g
            }
        };
        let mut runs = Vec::new();
        match self.kind {
            LayoutKind::LayerWise => {
                if self.per_sample {
                    for s in 0..self.shape[0] {
                        runs.push(Run {
                            start: s * sample_len,
                            len: sample_len,
                            group: s,
                        });
                    }
                } else {
                    runs.push(Run {
                        start: 0,
                        len: n,
                        group: 0,
                    });
                }
            }
            LayoutKind::HeadWise => {
                let per_head = self.shape[2] * self.shape[3];
                for (i, start) in (0..n).step_by(per_head).enumerate() {
                    runs.push(Run {
                        start,
                        len: per_head,
                        group: offset(start, i % self.groups),
                    });
                }
            }
            LayoutKind::ChannelGroup => {
                let c = self.channels();
                let spans: Vec<(usize, usize)> = (0..self.groups)
                    .map(|g| {
                        let lo = (g * c).div_ceil(self.groups);
                        let hi = ((g + 1) * c).div_ceil(self.groups);
                        (lo, hi - lo)
                    })
                    .collect();
                for row in (0..n).step_by(c) {
                    for (g, &(lo, len)) in spans.iter().enumerate() {
                        runs.push(Run {
                            start: row + lo,
                            len,
                            group: offset(row, g),
                        });
                    }
                }
            }
        }
        runs
    }

    /// Number of elements in each group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.group_count()];
        for r in self.runs() {
            sizes[r.group] += r.len;
        }
        sizes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn head_wise_groups_by_head() {
        let l = GroupLayout::head_wise(&[2, 3, 4, 5]).unwrap();
        assert_eq!(l.group_count(), 3);
        for idx in 0..l.numel() {
            let head = (idx / 20) % 3;
            assert_eq!(l.group_of(idx), head);
        }
        assert!(GroupLayout::head_wise(&[2, 3, 4]).is_err());
    }

    #[test]
    fn channel_group_uneven_spans() {
        let l = GroupLayout::channel_group(&[2, 10], 4).unwrap();
        let row: Vec<usize> = (0..10).map(|i| l.group_of(i)).collect();
        assert_eq!(row, vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3]);
        assert_eq!(l.group_sizes(), vec![6, 4, 6, 4]);
        assert!(GroupLayout::channel_group(&[2, 3], 4).is_err());
        assert!(GroupLayout::channel_group(&[2, 3], 0).is_err());
    }

    #[test]
    fn layer_wise_is_one_group() {
        let l = GroupLayout::layer_wise(&[3, 7]).unwrap();
        assert_eq!(l.group_count(), 1);
        assert_eq!(l.runs().len(), 1);
        let ps = l.per_sample();
        assert_eq!(ps.group_count(), 3);
        assert_eq!(ps.group_of(8), 1);
    }

    #[test]
    fn per_sample_head_wise() {
        let l = GroupLayout::head_wise(&[2, 4, 3, 3]).unwrap().per_sample();
        assert_eq!(l.group_count(), 8);
        assert_eq!(l.group_of(0), 0);
        assert_eq!(l.group_of(36 + 9), 4 + 1);
    }

    fn layouts() -> impl Strategy<Value = GroupLayout> {
        (
            1usize..4,
            1usize..5,
            1usize..5,
            1usize..7,
            1usize..9,
            any::<bool>(),
            0u8..3,
        )
            .prop_map(|(b, h, n, x, g, ps, kind)| {
                let l = match kind {
                    0 => GroupLayout::head_wise(&[b, h, n, x]).unwrap(),
                    1 => GroupLayout::channel_group(&[b, h * n, x.max(g)], g).unwrap(),
                    _ => GroupLayout::layer_wise(&[b, n, x]).unwrap(),
                };
                if ps {
                    l.per_sample()
                } else {
                    l
                }
            })
    }

    proptest! {
        #[test]
        fn runs_partition_the_tensor(l in layouts()) {
            let mut covered = vec![usize::MAX; l.numel()];
            for r in l.runs() {
                for i in r.start..r.start + r.len {
                    prop_assert_eq!(covered[i], usize::MAX);
                    covered[i] = r.group;
                }
            }
            for (i, g) in covered.iter().enumerate() {
                prop_assert!(*g < l.group_count());
                prop_assert_eq!(*g, l.group_of(i));
            }
            let sizes = l.group_sizes();
            prop_assert!(sizes.iter().all(|&s| s > 0));
            if l.kind() == LayoutKind::ChannelGroup {
                let min = sizes.iter().min().unwrap();
                let max = sizes.iter().max().unwrap();
                let rows = l.numel() / l.shape().last().unwrap();
                let rows = if l.is_per_sample() { rows / l.shape()[0] } else { rows };
                prop_assert!(max - min <= rows);
            }
        }
    }
}

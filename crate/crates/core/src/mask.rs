use crate::error::{shape_err, Result};

/// Row-major 2-d grid of labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask<L> {
    height: usize,
    width: usize,
    data: Vec<L>,
}

/// Class map, 0 = background.
pub type LabelMask = Mask<u8>;
pub type BinaryMask = Mask<bool>;
/// Instance ids, 0 = background.
pub type InstanceMap = Mask<u32>;

impl<L: Copy + Default + PartialEq> Mask<L> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![L::default(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<L>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[L] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> L {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: L) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<M: Copy + Default + PartialEq>(&self, f: impl Fn(L) -> M) -> Mask<M> {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn count(&self, pred: impl Fn(L) -> bool) -> usize {
        self.data.iter().filter(|&&v| pred(v)).count()
    }

    pub(crate) fn same_dims<M>(&self, other: &Mask<M>) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return shape_err(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn foreground(&self) -> usize {
        self.count(|v| v)
    }
}

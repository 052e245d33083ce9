//! 8-bit feature maps stored as channel-major planes.
//!
//! Raw file layout (little endian): the 4 bytes `RCT1`, then `u32` width,
//! height and channels, then `w * h * c` signed bytes ordered
//! channel, row, column.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::netir::TensorShape;

const MAGIC: &[u8; 4] = b"RCT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<i8>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0; shape.elems() as usize],
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<i8>) -> Result<Self> {
        if data.len() as u64 != shape.elems() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {shape} tensor",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn random<R: Rng>(shape: TensorShape, rng: &mut R) -> Self {
        let data = (0..shape.elems()).map(|_| rng.random::<i8>()).collect();
        Self { shape, data }
    }

    pub fn width(&self) -> usize {
        self.shape.width as usize
    }

    pub fn height(&self) -> usize {
        self.shape.height as usize
    }

    pub fn channels(&self) -> usize {
        self.shape.channels as usize
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height() + y) * self.width() + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: i8) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Copy of rows `r0..r1` of every channel.
    pub fn rows(&self, r0: usize, r1: usize) -> Tensor {
        let (w, h) = (self.width(), self.height());
        let r1 = r1.min(h);
        let r0 = r0.min(r1);
        let mut data = Vec::with_capacity(self.channels() * (r1 - r0) * w);
        for c in 0..self.channels() {
            data.extend_from_slice(&self.data[self.index(c, r0, 0)..self.index(c, r0, 0) + (r1 - r0) * w]);
        }
        Tensor {
            shape: TensorShape::new(self.shape.width, (r1 - r0) as u32, self.shape.channels),
            data,
        }
    }

    /// Writes `part` into this tensor starting at row `r0`.
    pub fn put_rows(&mut self, r0: usize, part: &Tensor) {
        assert_eq!(part.shape.width, self.shape.width);
        assert_eq!(part.shape.channels, self.shape.channels);
        let w = self.width();
        let n = part.height().min(self.height().saturating_sub(r0));
        for c in 0..self.channels() {
            let dst = self.index(c, r0, 0);
            let src = part.index(c, 0, 0);
            self.data[dst..dst + n * w].copy_from_slice(&part.data[src..src + n * w]);
        }
    }

    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.shape.width, self.shape.height, self.shape.channels] {
            w.write_all(&v.to_le_bytes())?;
        }
        let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a raw tensor file".into()));
        }
        let mut dims = [0u32; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        let shape = TensorShape::new(dims[0], dims[1], dims[2]);
        let mut bytes = vec![0u8; shape.elems() as usize];
        r.read_exact(&mut bytes)?;
        Tensor::from_vec(shape, bytes.into_iter().map(|b| b as i8).collect())
    }
}

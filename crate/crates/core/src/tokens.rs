//! Grid and token views of the same features, and the reshapes between them.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Channel-first feature grid, `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct FeatureMap(pub Tensor);

/// Spatial tokens `[B, N, D]` with the grid they were flattened from.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims4()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    /// Image-to-tokens: `[B, C, H, W] -> [B, H*W, C]`, row-major over the grid.
    pub fn to_tokens(&self) -> Result<TokenSequence> {
        let (b, c, h, w) = self.0.dims4()?;
        let tokens = self.0.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        Ok(TokenSequence { tokens, grid: (h, w) })
    }
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "{n} tokens cannot form a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.grid)
    }

    /// Tokens-to-image: inverse of [`FeatureMap::to_tokens`].
    pub fn to_map(&self) -> Result<FeatureMap> {
        let (b, n, d) = self.tokens.dims3()?;
        let (h, w) = self.grid;
        debug_assert_eq!(n, h * w);
        Ok(FeatureMap(self.tokens.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn token_round_trip_is_exact(b in 1usize..3, c in 1usize..6, h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
            let n = b * c * h * w;
            let vals: Vec<f32> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 7.0).collect();
            let x = Tensor::from_vec(vals.clone(), (b, c, h, w), &Device::Cpu).unwrap();
            let fm = FeatureMap::new(x).unwrap();
            let ts = fm.to_tokens().unwrap();
            prop_assert_eq!(ts.len(), h * w);
            let back: Vec<f32> = ts.to_map().unwrap().0.flatten_all().unwrap().to_vec1().unwrap();
            prop_assert_eq!(back, vals);
        }
    }

    #[test]
    fn token_order_is_row_major() {
        // one channel, 2x3 grid; token k must be pixel (k / 3, k % 3)
        let x = Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 3)).unwrap();
        let t = FeatureMap(x).to_tokens().unwrap();
        let v: Vec<f32> = t.tokens.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn bad_grid_rejected() {
        let t = Tensor::zeros((1, 5, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(TokenSequence::new(t, (2, 2)).is_err());
    }
}

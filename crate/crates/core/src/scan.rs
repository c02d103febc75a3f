//! Scan orders over 2D token grids and the four-direction scanners.

use crate::error::{Error, Result};
use crate::init::InitRng;
use crate::params::{join, Module, Visitor};
use crate::scalar::Scalar;
use crate::ssm::{selective_scan, SsmBlockParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisMajor {
    Row,
    Column,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Forward,
    Backward,
}

/// One of the four total orders over the cells of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanDirection {
    pub axis_major: AxisMajor,
    pub orientation: Orientation,
}

impl ScanDirection {
    pub const ROW_FORWARD: Self = Self::new(AxisMajor::Row, Orientation::Forward);
    pub const COLUMN_FORWARD: Self = Self::new(AxisMajor::Column, Orientation::Forward);
    pub const ROW_BACKWARD: Self = Self::new(AxisMajor::Row, Orientation::Backward);
    pub const COLUMN_BACKWARD: Self = Self::new(AxisMajor::Column, Orientation::Backward);

    /// All directions in merge order.
    pub const ALL: [Self; 4] = [
        Self::ROW_FORWARD,
        Self::COLUMN_FORWARD,
        Self::ROW_BACKWARD,
        Self::COLUMN_BACKWARD,
    ];

    pub const fn new(axis_major: AxisMajor, orientation: Orientation) -> Self {
        ScanDirection { axis_major, orientation }
    }

    pub fn name(self) -> &'static str {
        match (self.axis_major, self.orientation) {
            (AxisMajor::Row, Orientation::Forward) => "row_fwd",
            (AxisMajor::Column, Orientation::Forward) => "col_fwd",
            (AxisMajor::Row, Orientation::Backward) => "row_bwd",
            (AxisMajor::Column, Orientation::Backward) => "col_bwd",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }

    /// Same orientation, other axis.
    pub fn transposed(self) -> Self {
        let axis_major = match self.axis_major {
            AxisMajor::Row => AxisMajor::Column,
            AxisMajor::Column => AxisMajor::Row,
        };
        ScanDirection { axis_major, ..self }
    }

    /// Row-major cell indices `r·cols + c` in visit order.
    pub fn order(self, rows: usize, cols: usize) -> Vec<usize> {
        let mut v: Vec<usize> = match self.axis_major {
            AxisMajor::Row => (0..rows * cols).collect(),
            AxisMajor::Column => (0..cols)
                .flat_map(|c| (0..rows).map(move |r| r * cols + c))
                .collect(),
        };
        if self.orientation == Orientation::Backward {
            v.reverse();
        }
        v
    }
}

fn grid_dims<S: Scalar>(op: &'static str, grid: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match grid.shape() {
        [c, r, s] => Ok((*c, *r, *s)),
        s => Err(Error::dim(op, format!("expected a [C, R, S] grid, got {s:?}"))),
    }
}

/// `[C, R, S]` grid to a `[R·S, C]` token sequence in the direction's order.
pub fn unfold<S: Scalar>(grid: &Tensor<S>, dir: ScanDirection) -> Result<Tensor<S>> {
    let (c, r, s) = grid_dims("unfold", grid)?;
    grid.permute(&[1, 2, 0])?
        .reshape(vec![r * s, c])?
        .index_select0(&dir.order(r, s))
}

/// Inverse of [`unfold`] for the same direction.
pub fn fold<S: Scalar>(seq: &Tensor<S>, dir: ScanDirection, shape: (usize, usize)) -> Result<Tensor<S>> {
    let (r, s) = shape;
    let c = match seq.shape() {
        [l, c] if *l == r * s => *c,
        sh => {
            return Err(Error::dim(
                "fold",
                format!("sequence {sh:?} does not hold {r}×{s} = {} tokens", r * s),
            ))
        }
    };
    let order = dir.order(r, s);
    let mut inverse = vec![0; order.len()];
    for (pos, &cell) in order.iter().enumerate() {
        inverse[cell] = pos;
    }
    seq.index_select0(&inverse)?
        .reshape(vec![r, s, c])?
        .permute(&[2, 0, 1])
}

/// One S6 block per scan direction, indexed in [`ScanDirection::ALL`] order.
#[derive(Clone, Debug)]
pub struct DirectionalScanParams<S: Scalar> {
    pub blocks: [SsmBlockParams<S>; 4],
}

impl<S: Scalar> DirectionalScanParams<S> {
    pub fn init(d: usize, n: usize, rng: &mut InitRng) -> Self {
        DirectionalScanParams {
            blocks: std::array::from_fn(|_| SsmBlockParams::init(d, n, rng)),
        }
    }

    /// All four directions share `p`.
    pub fn tied(p: SsmBlockParams<S>) -> Self {
        DirectionalScanParams {
            blocks: std::array::from_fn(|_| p.clone()),
        }
    }

    pub fn get(&self, dir: ScanDirection) -> &SsmBlockParams<S> {
        &self.blocks[dir.index()]
    }

    pub fn get_mut(&mut self, dir: ScanDirection) -> &mut SsmBlockParams<S> {
        &mut self.blocks[dir.index()]
    }

    /// Row and column parameter sets swapped.
    pub fn transposed(&self) -> Self {
        DirectionalScanParams {
            blocks: std::array::from_fn(|i| self.get(ScanDirection::ALL[i].transposed()).clone()),
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        let (d, n) = (self.blocks[0].channels(), self.blocks[0].state_size());
        if self.blocks.iter().any(|b| b.channels() != d || b.state_size() != n) {
            return Err(Error::contract("directional scan blocks disagree on (d, N)"));
        }
        if d != channels {
            return Err(Error::dim("ss2d", format!("grid has {channels} channels, scan expects {d}")));
        }
        Ok(())
    }
}

impl<S: Scalar> Module<S> for DirectionalScanParams<S> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, S>) -> Result<()> {
        for (dir, block) in ScanDirection::ALL.iter().zip(self.blocks.iter_mut()) {
            block.visit(&join(prefix, dir.name()), f)?;
        }
        Ok(())
    }
}

/// Four-direction scan of a `[C, H, W]` grid; folded outputs are summed in
/// [`ScanDirection::ALL`] order.
pub fn ss2d<S: Scalar>(x: &Tensor<S>, params: &DirectionalScanParams<S>) -> Result<Tensor<S>> {
    ss2d_with(x, params, |seq, block, _| selective_scan(seq, block))
}

/// [`ss2d`] with a caller-supplied sequence scanner.
pub fn ss2d_with<S: Scalar>(
    x: &Tensor<S>,
    params: &DirectionalScanParams<S>,
    scan: impl Fn(&Tensor<S>, &SsmBlockParams<S>, ScanDirection) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    let (c, h, w) = grid_dims("ss2d", x)?;
    params.check(c)?;
    let mut total: Option<Tensor<S>> = None;
    for dir in ScanDirection::ALL {
        let y = fold(&scan(&unfold(x, dir)?, params.get(dir), dir)?, dir, (h, w))?;
        total = Some(match total {
            None => y,
            Some(acc) => acc.add(&y)?,
        });
    }
    Ok(total.expect("four directions"))
}

/// Stacks K slice features `[C, h, w]` into the `[C, K, h·w]` slice-token grid.
pub fn slice_token_grid<S: Scalar>(slices: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::contract("fss2d needs at least one slice"))?;
    let (c, h, w) = grid_dims("fss2d", first)?;
    if let Some(bad) = slices.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::dim(
            "fss2d",
            format!("slice shape {:?} differs from {:?}", bad.shape(), first.shape()),
        ));
    }
    let refs: Vec<&Tensor<S>> = slices.iter().collect();
    Tensor::stack(&refs)?
        .reshape(vec![slices.len(), c, h * w])?
        .permute(&[1, 0, 2])
}

/// Inverse of [`slice_token_grid`].
pub fn split_slice_token_grid<S: Scalar>(grid: &Tensor<S>, h: usize, w: usize) -> Result<Vec<Tensor<S>>> {
    let (c, k, _) = grid_dims("fss2d", grid)?;
    grid.permute(&[1, 0, 2])?
        .reshape(vec![k, c, h, w])?
        .unstack0()
}

/// Four-direction scan over the K×L grid whose rows are slices and whose
/// columns are the `L = h·w` token positions.
pub fn fss2d<S: Scalar>(slices: &[Tensor<S>], params: &DirectionalScanParams<S>) -> Result<Vec<Tensor<S>>> {
    let grid = slice_token_grid(slices)?;
    let (h, w) = (slices[0].shape()[1], slices[0].shape()[2]);
    split_slice_token_grid(&ss2d(&grid, params)?, h, w)
}

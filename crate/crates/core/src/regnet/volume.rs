use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Scalar intensity grid `[H, W, D]` with physical spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    data: Tensor<T>,
    spacing: [f64; 3],
    pub id: String,
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl<T: Real> Volume<T> {
    pub fn new(data: Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::shape("volume", format!("expected [H, W, D], got {:?}", data.shape())));
        }
        check_spacing(spacing)?;
        Ok(Self {
            data,
            spacing,
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// `[1, H, W, D]` view for networks.
    pub fn as_channels(&self) -> Tensor<T> {
        let [h, w, d] = self.dims();
        self.data.reshape(vec![1, h, w, d]).expect("same size")
    }

    pub fn is_normalized(&self) -> bool {
        self.data.data().iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    /// Rescale to `[0, 1]`; a constant volume cannot be normalized.
    pub fn min_max_normalize(&mut self) -> Result<()> {
        let (lo, hi) = self
            .data
            .data()
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(hi > lo) {
            return Err(Error::Data("cannot normalize a constant volume".into()));
        }
        let range = hi - lo;
        for v in self.data.data_mut() {
            *v = ((*v - lo) / range).max(T::zero()).min(T::one());
        }
        Ok(())
    }
}

/// Integer segmentation grid `[H, W, D]`, labels `0..num_classes` (0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u16>,
    num_classes: usize,
    spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, num_classes: usize, spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) || dims.iter().product::<usize>() != labels.len() {
            return Err(Error::shape("label volume", format!("{dims:?} vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        check_spacing(spacing)?;
        Ok(Self {
            dims,
            labels,
            num_classes,
            spacing,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn mask(&self, class: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// `[K, H, W, D]` indicator channels.
    pub fn one_hot<T: Real>(&self) -> Tensor<T> {
        let n = self.labels.len();
        let mut data = vec![T::zero(); self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = T::one();
        }
        let [h, w, d] = self.dims;
        Tensor::new(vec![self.num_classes, h, w, d], data).expect("consistent shape")
    }

    /// Hard labels from `[K, H, W, D]` soft channels (ties go to the lower class).
    pub fn from_soft<T: Real>(soft: &Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        if soft.ndim() != 4 {
            return Err(Error::shape("label argmax", format!("{:?}", soft.shape())));
        }
        let k = soft.shape()[0];
        let dims = [soft.shape()[1], soft.shape()[2], soft.shape()[3]];
        let n: usize = dims.iter().product();
        let d = soft.data();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + i] > d[best * n + i] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        Self::new(dims, labels, k, spacing)
    }
}

/// Per-voxel 3-vector field `[3, H, W, D]` in voxel units.
macro_rules! vector_field {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T>(Tensor<T>);

        impl<T: Real> $name<T> {
            pub fn new(data: Tensor<T>) -> Result<Self> {
                if data.ndim() != 4 || data.shape()[0] != 3 {
                    return Err(Error::shape(stringify!($name), format!("expected [3, H, W, D], got {:?}", data.shape())));
                }
                Ok(Self(data))
            }

            pub fn zeros(dims: [usize; 3]) -> Self {
                Self(Tensor::zeros(vec![3, dims[0], dims[1], dims[2]]))
            }

            pub fn dims(&self) -> [usize; 3] {
                let s = self.0.shape();
                [s[1], s[2], s[3]]
            }

            pub fn tensor(&self) -> &Tensor<T> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<T> {
                self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.all_finite()
            }

            /// Largest per-voxel Euclidean vector length.
            pub fn max_norm(&self) -> T {
                let n = self.0.numel() / 3;
                let d = self.0.data();
                (0..n)
                    .map(|i| (d[i] * d[i] + d[n + i] * d[n + i] + d[2 * n + i] * d[2 * n + i]).sqrt())
                    .fold(T::zero(), T::max)
            }
        }
    };
}

vector_field!(
    /// Stationary velocity field, integrated to a deformation by scaling and squaring.
    VelocityField
);
vector_field!(
    /// Displacement `u` of the map `φ(x) = x + u(x)`.
    DisplacementField
);

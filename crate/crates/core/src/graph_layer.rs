//! Graph-variable layers.
//!
//! A layer holds `m` anchor points (the columns of a `p × m` matrix), a bias
//! vector and a pairwise function `A(·,·)`. Its output for a row input `x` is
//!
//! ```text
//! Z = σ([A(x, α_1), …, A(x, α_m)] + β)
//! ```
//!
//! The classical fully connected layer `σ(xα + β)` is the `InnerProduct`
//! case. The plain graph variable is recovered with `Identity` activation and
//! zero bias.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Pairwise function pairing an input with one anchor point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairwiseRepr", into = "PairwiseRepr")]
pub enum PairwiseFunction {
    InnerProduct,
    EuclideanDistance,
    SquaredEuclideanDistance,
    GaussianKernel { bandwidth: f64 },
    CosineSimilarity,
}

impl PairwiseFunction {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Gaussian kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(PairwiseFunction::GaussianKernel { bandwidth })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PairwiseFunction::InnerProduct => "InnerProduct",
            PairwiseFunction::EuclideanDistance => "EuclideanDistance",
            PairwiseFunction::SquaredEuclideanDistance => "SquaredEuclideanDistance",
            PairwiseFunction::GaussianKernel { .. } => "GaussianKernel",
            PairwiseFunction::CosineSimilarity => "CosineSimilarity",
        }
    }

    /// Evaluates `A(x, a)`.
    pub fn eval(&self, x: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<f64> {
        if x.len() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: x.len(),
            });
        }
        if !all_finite(x) || !all_finite(a) {
            return Err(Error::NonFinite("pairwise function input"));
        }
        self.validate()?;
        self.eval_unchecked(x, a)
    }

    fn validate(&self) -> Result<()> {
        if let PairwiseFunction::GaussianKernel { bandwidth } = *self {
            PairwiseFunction::gaussian(bandwidth)?;
        }
        Ok(())
    }

    // Shapes and finiteness are the caller's responsibility.
    fn eval_unchecked(&self, x: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<f64> {
        Ok(match *self {
            PairwiseFunction::InnerProduct => linalg::dot(x, a),
            PairwiseFunction::EuclideanDistance => linalg::squared_distance(x, a).sqrt(),
            PairwiseFunction::SquaredEuclideanDistance => linalg::squared_distance(x, a),
            PairwiseFunction::GaussianKernel { bandwidth } => {
                (-linalg::squared_distance(x, a) / (2.0 * bandwidth * bandwidth)).exp()
            }
            PairwiseFunction::CosineSimilarity => {
                let nx = linalg::norm(x);
                let na = linalg::norm(a);
                if nx == 0.0 || na == 0.0 {
                    return Err(Error::ZeroVector);
                }
                linalg::dot(x, a) / (nx * na)
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PairwiseRepr {
    variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth: Option<f64>,
}

impl TryFrom<PairwiseRepr> for PairwiseFunction {
    type Error = String;

    fn try_from(repr: PairwiseRepr) -> std::result::Result<Self, String> {
        let f = match repr.variant.as_str() {
            "InnerProduct" => PairwiseFunction::InnerProduct,
            "EuclideanDistance" => PairwiseFunction::EuclideanDistance,
            "SquaredEuclideanDistance" => PairwiseFunction::SquaredEuclideanDistance,
            "CosineSimilarity" => PairwiseFunction::CosineSimilarity,
            "GaussianKernel" => {
                let bandwidth = repr
                    .bandwidth
                    .ok_or_else(|| "missing field `bandwidth` for GaussianKernel".to_string())?;
                PairwiseFunction::gaussian(bandwidth).map_err(|e| e.to_string())?
            }
            other => return Err(format!("unknown pairwise variant `{other}`")),
        };
        Ok(f)
    }
}

impl From<PairwiseFunction> for PairwiseRepr {
    fn from(f: PairwiseFunction) -> Self {
        let bandwidth = match f {
            PairwiseFunction::GaussianKernel { bandwidth } => Some(bandwidth),
            _ => None,
        };
        PairwiseRepr {
            variant: f.name().to_string(),
            bandwidth,
        }
    }
}

/// Coordinate-wise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    ReLU,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply_scalar(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::ReLU => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `v`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::ReLU => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply_scalar(v);
                s * (1.0 - s)
            }
        }
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if !all_finite(v) {
            return Err(Error::NonFinite("activation input"));
        }
        Ok(v.mapv(|x| self.apply_scalar(x)))
    }
}

/// One graph-variable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct GraphLayer {
    anchors: Array2<f64>,
    bias: Array1<f64>,
    pairwise: PairwiseFunction,
    activation: Activation,
}

impl GraphLayer {
    /// `anchors` is `input_dim × m`; column `j` is anchor point `α_j`.
    pub fn new(
        anchors: Array2<f64>,
        bias: Array1<f64>,
        pairwise: PairwiseFunction,
        activation: Activation,
    ) -> Result<Self> {
        if anchors.ncols() == 0 {
            return Err(Error::Empty("layer anchors"));
        }
        if anchors.nrows() == 0 {
            return Err(Error::Empty("anchor dimension"));
        }
        if bias.len() != anchors.ncols() {
            return Err(Error::DimensionMismatch {
                expected: anchors.ncols(),
                got: bias.len(),
            });
        }
        if !anchors.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("layer anchors"));
        }
        if !all_finite(bias.view()) {
            return Err(Error::NonFinite("layer bias"));
        }
        pairwise.validate()?;
        Ok(GraphLayer {
            anchors,
            bias,
            pairwise,
            activation,
        })
    }

    /// Layer with zero bias.
    pub fn unbiased(
        anchors: Array2<f64>,
        pairwise: PairwiseFunction,
        activation: Activation,
    ) -> Result<Self> {
        let m = anchors.ncols();
        GraphLayer::new(anchors, Array1::zeros(m), pairwise, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.anchors.nrows()
    }

    /// Number of anchors `m`, which is also the output dimension.
    pub fn width(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn anchors(&self) -> ArrayView2<'_, f64> {
        self.anchors.view()
    }

    pub fn anchor(&self, j: usize) -> ArrayView1<'_, f64> {
        self.anchors.column(j)
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.bias.view()
    }

    pub fn pairwise(&self) -> PairwiseFunction {
        self.pairwise
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Replaces anchors and bias, keeping the pairwise function and activation.
    pub fn with_parameters(&self, anchors: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        GraphLayer::new(anchors, bias, self.pairwise, self.activation)
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !all_finite(x) {
            return Err(Error::NonFinite("layer input"));
        }
        let mut out = Array1::zeros(self.width());
        for (j, slot) in out.iter_mut().enumerate() {
            let a = self.pairwise.eval_unchecked(x, self.anchors.column(j))?;
            *slot = self.activation.apply_scalar(a + self.bias[j]);
        }
        Ok(out)
    }

    /// Maps each row of `x` (an `n × input_dim` batch) independently.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut out = Array2::zeros((x.nrows(), self.width()));
        for (row, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            dst.assign(&self.forward(row)?);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    input_dim: usize,
    m: usize,
    pairwise: PairwiseFunction,
    activation: Activation,
    anchors: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<LayerRepr> for GraphLayer {
    type Error = String;

    fn try_from(repr: LayerRepr) -> std::result::Result<Self, String> {
        if repr.anchors.len() != repr.m {
            return Err(format!(
                "field `anchors`: expected {} columns, found {}",
                repr.m,
                repr.anchors.len()
            ));
        }
        let mut anchors = Array2::zeros((repr.input_dim, repr.m));
        for (j, column) in repr.anchors.iter().enumerate() {
            if column.len() != repr.input_dim {
                return Err(format!(
                    "field `anchors`: column {j} has length {}, expected {}",
                    column.len(),
                    repr.input_dim
                ));
            }
            for (i, &v) in column.iter().enumerate() {
                anchors[[i, j]] = v;
            }
        }
        if repr.bias.len() != repr.m {
            return Err(format!(
                "field `bias`: expected length {}, found {}",
                repr.m,
                repr.bias.len()
            ));
        }
        GraphLayer::new(
            anchors,
            Array1::from(repr.bias),
            repr.pairwise,
            repr.activation,
        )
        .map_err(|e| e.to_string())
    }
}

impl From<GraphLayer> for LayerRepr {
    fn from(layer: GraphLayer) -> Self {
        LayerRepr {
            input_dim: layer.input_dim(),
            m: layer.width(),
            pairwise: layer.pairwise,
            activation: layer.activation,
            anchors: layer
                .anchors
                .axis_iter(Axis(1))
                .map(|c| c.to_vec())
                .collect(),
            bias: layer.bias.to_vec(),
        }
    }
}

/// A finite stack of layers with a consistent dimension chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    layers: Vec<GraphLayer>,
}

impl Network {
    pub fn new(layers: Vec<GraphLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].width() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].width(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[GraphLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].width()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut z = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            z = layer.forward(z.view())?;
        }
        Ok(z)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.layers[0].forward_batch(x)?;
        for layer in &self.layers[1..] {
            z = layer.forward_batch(z.view())?;
        }
        Ok(z)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    layers: Vec<GraphLayer>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = String;

    fn try_from(repr: NetworkRepr) -> std::result::Result<Self, String> {
        Network::new(repr.layers).map_err(|e| format!("field `layers`: {e}"))
    }
}

impl From<Network> for NetworkRepr {
    fn from(net: Network) -> Self {
        NetworkRepr { layers: net.layers }
    }
}

/// Appends `‖x‖` to a code vector, giving `[codes; ‖x‖]`.
pub fn augment_with_norm(codes: ArrayView1<f64>, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("input vector"));
    }
    if !all_finite(codes) || !all_finite(x) {
        return Err(Error::NonFinite("augment_with_norm input"));
    }
    let mut out = Vec::with_capacity(codes.len() + 1);
    out.extend(codes.iter().copied());
    out.push(linalg::norm(x));
    Ok(Array1::from(out))
}

fn all_finite(v: ArrayView1<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn pairwise_examples() {
        let ip = PairwiseFunction::InnerProduct;
        assert_eq!(ip.eval(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);

        let g = PairwiseFunction::gaussian(1.0).unwrap();
        assert_eq!(g.eval(array![3.0, 4.0].view(), array![3.0, 4.0].view()).unwrap(), 1.0);

        let sq = PairwiseFunction::SquaredEuclideanDistance;
        // 3² + 4²
        assert_eq!(sq.eval(array![1.0, 2.0].view(), array![4.0, 6.0].view()).unwrap(), 25.0);
        let d = PairwiseFunction::EuclideanDistance;
        assert_eq!(d.eval(array![1.0, 2.0].view(), array![4.0, 6.0].view()).unwrap(), 5.0);
    }

    #[test]
    fn pairwise_errors() {
        let ip = PairwiseFunction::InnerProduct;
        assert!(matches!(
            ip.eval(array![1.0].view(), array![1.0, 2.0].view()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ip.eval(array![f64::NAN].view(), array![1.0].view()),
            Err(Error::NonFinite(_))
        ));
        let cos = PairwiseFunction::CosineSimilarity;
        assert!(matches!(
            cos.eval(array![0.0, 0.0].view(), array![1.0, 0.0].view()),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cos.eval(array![1.0, 0.0].view(), array![0.0, 0.0].view()),
            Err(Error::ZeroVector)
        ));
        assert!(PairwiseFunction::gaussian(0.0).is_err());
        assert!(PairwiseFunction::gaussian(-1.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let relu = Activation::ReLU.apply(array![-1.0, 0.0, 2.0].view()).unwrap();
        assert_eq!(relu, array![0.0, 0.0, 2.0]);
        assert_eq!(Activation::Sigmoid.apply(array![0.0].view()).unwrap(), array![0.5]);
        assert_eq!(
            Activation::Identity.apply(array![-3.5, 7.0].view()).unwrap(),
            array![-3.5, 7.0]
        );
        assert!(Activation::ReLU.apply(array![f64::INFINITY].view()).is_err());
    }

    #[test]
    fn layer_forward_examples() {
        let identity = GraphLayer::unbiased(
            Array2::eye(2),
            PairwiseFunction::InnerProduct,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(identity.forward(array![3.0, 5.0].view()).unwrap(), array![3.0, 5.0]);

        // (3·1 + 1·0 − 2, 3·0 + 1·1 − 2) = (1, −1) → ReLU → (1, 0)
        let relu = GraphLayer::new(
            Array2::eye(2),
            array![-2.0, -2.0],
            PairwiseFunction::InnerProduct,
            Activation::ReLU,
        )
        .unwrap();
        assert_eq!(relu.forward(array![3.0, 1.0].view()).unwrap(), array![1.0, 0.0]);

        let x = array![0.3, -1.2];
        let kernel = GraphLayer::unbiased(
            x.clone().insert_axis(Axis(1)),
            PairwiseFunction::gaussian(1.0).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(kernel.forward(x.view()).unwrap(), array![1.0]);

        assert!(matches!(
            identity.forward(array![1.0].view()),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn layer_rejects_bad_shapes() {
        assert!(GraphLayer::new(
            Array2::zeros((2, 0)),
            Array1::zeros(0),
            PairwiseFunction::InnerProduct,
            Activation::Identity
        )
        .is_err());
        assert!(GraphLayer::new(
            Array2::zeros((2, 2)),
            Array1::zeros(3),
            PairwiseFunction::InnerProduct,
            Activation::Identity
        )
        .is_err());
        let mut anchors = Array2::zeros((2, 2));
        anchors[[0, 1]] = f64::NAN;
        assert!(GraphLayer::unbiased(anchors, PairwiseFunction::InnerProduct, Activation::ReLU).is_err());
    }

    #[test]
    fn network_composition() {
        let id = || {
            GraphLayer::unbiased(Array2::eye(3), PairwiseFunction::InnerProduct, Activation::Identity)
                .unwrap()
        };
        let net = Network::new(vec![id(), id()]).unwrap();
        let x = array![1.5, -2.0, 0.25];
        assert_eq!(net.forward(x.view()).unwrap(), x);

        let single = Network::new(vec![id()]).unwrap();
        assert_eq!(single.forward(x.view()).unwrap(), id().forward(x.view()).unwrap());

        let narrow = GraphLayer::unbiased(
            Array2::ones((2, 4)),
            PairwiseFunction::InnerProduct,
            Activation::Identity,
        )
        .unwrap();
        assert!(matches!(
            Network::new(vec![id(), narrow]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        assert!(Network::new(vec![]).is_err());
    }

    #[test]
    fn augment_examples() {
        assert_eq!(
            augment_with_norm(array![0.5].view(), array![3.0, 4.0].view()).unwrap(),
            array![0.5, 5.0]
        );
        assert_eq!(
            augment_with_norm(Array1::<f64>::zeros(0).view(), array![1.0].view()).unwrap(),
            array![1.0]
        );
        assert_eq!(
            augment_with_norm(array![1.0, 2.0].view(), array![0.0, 0.0].view()).unwrap(),
            array![1.0, 2.0, 0.0]
        );
        assert!(augment_with_norm(array![1.0].view(), Array1::<f64>::zeros(0).view()).is_err());
    }

    #[test]
    fn json_layout_is_column_major() {
        let layer = GraphLayer::new(
            array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            array![0.5, -0.5],
            PairwiseFunction::gaussian(2.0).unwrap(),
            Activation::Sigmoid,
        )
        .unwrap();
        let value = serde_json::to_value(&layer).unwrap();
        assert_eq!(value["input_dim"], 3);
        assert_eq!(value["m"], 2);
        assert_eq!(value["anchors"][0], serde_json::json!([1.0, 3.0, 5.0]));
        assert_eq!(value["pairwise"]["variant"], "GaussianKernel");
        assert_eq!(value["pairwise"]["bandwidth"], 2.0);
        assert_eq!(value["activation"], "Sigmoid");
        let back: GraphLayer = serde_json::from_value(value).unwrap();
        assert_eq!(back, layer);
    }
}

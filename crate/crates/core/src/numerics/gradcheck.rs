use rand::Rng;

use crate::numerics::params::Bound;
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of `loss_fn` against central finite
/// differences over every coordinate of every trainable parameter.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`. The floor
/// keeps coordinates whose true gradient is zero (such as a key bias under
/// softmax) from turning rounding noise into a large ratio.
pub fn grad_check<T, E, F>(store: &mut ParamStore<T>, eps: T, mut loss_fn: F) -> Result<GradCheckReport<T>, E>
where
    T: Scalar,
    E: From<NumericsError>,
    F: FnMut(&mut Graph<T>, &Bound) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Tensor<T>>> = bound.take_grads(&mut g);

    let mut eval = |store: &ParamStore<T>| -> Result<T, E> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = loss_fn(&mut g, &bound)?;
        Ok(g.value(loss).item())
    };

    let floor = T::lit(1e-6);
    let two_eps = eps + eps;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / two_eps;
            let a = analytic[id.0].as_ref().map_or(T::zero(), |t| t.data()[i]);
            let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Worst relative error of every differentiable primitive on small random
/// inputs, each reduced to a scalar through fixed random weights.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    type Op = fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>;
    const KM: [bool; 5] = [true, false, true, true, false];
    const OFFS: [usize; 4] = [0, 2, 3, 6];
    let cases: Vec<(&'static str, Vec<Vec<usize>>, Op)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| g.scale(v[0], -2.5)),
        ("tanh", vec![vec![3, 4]], |g, v| g.tanh(v[0])),
        ("relu", vec![vec![3, 4]], |g, v| g.relu(v[0])),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("add_diag", vec![vec![3, 3], vec![]], |g, v| g.add_diag(v[0], v[1])),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0], None)),
        ("masked_softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0], Some(&KM))),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        ("cross_entropy", vec![vec![5]], |g, v| g.cross_entropy(v[0], 2)),
        ("row_cross_entropy", vec![vec![2, 3]], |g, v| {
            g.row_cross_entropy(v[0], &[Some(1), Some(0)], Some(&[true, true, false, true, true, true]))
        }),
        ("max_of", vec![vec![2, 3], vec![2, 3], vec![2, 3]], |g, v| g.max_of(v)),
        ("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], vec![3, 2])),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| {
            g.gather_rows(v[0], &[3, 0, 3, 1])
        }),
        ("zero_rows", vec![vec![4, 3]], |g, v| {
            g.zero_rows(v[0], &[false, true, false, true])
        }),
        ("attention", vec![vec![3, 8], vec![5, 8], vec![5, 8]], |g, v| {
            g.attention(v[0], v[1], v[2], 2, None)
        }),
        ("masked_attention", vec![vec![3, 8], vec![5, 8], vec![5, 8]], |g, v| {
            g.attention(v[0], v[1], v[2], 4, Some(&KM))
        }),
        ("segment_softmax", vec![vec![6]], |g, v| g.segment_softmax(v[0], &OFFS)),
        ("segment_weighted_sum", vec![vec![6, 3], vec![6]], |g, v| {
            g.segment_weighted_sum(v[0], v[1], &OFFS)
        }),
    ];
    let mut r = crate::rng::stream(seed, "gradcheck");
    let mut out = Vec::with_capacity(cases.len());
    for (name, shapes, op) in cases {
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.insert(&format!("x{i}"), random(&mut r, s), true))
            .collect::<Result<_, _>>()?;
        let n_out = {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let vars: Vec<Var> = ids.iter().map(|&id| b[id]).collect();
            let y = op(&mut g, &vars)?;
            g.shape(y).to_vec()
        };
        let w = random(&mut r, &n_out);
        let report = grad_check(
            &mut store,
            1e-5,
            |g: &mut Graph<f64>, b: &Bound| -> Result<Var, NumericsError> {
                let vars: Vec<Var> = ids.iter().map(|&id| b[id]).collect();
                let y = op(g, &vars)?;
                let y = g.mul_const(y, w.clone())?;
                g.sum(y)
            },
        )?;
        out.push((name, report.max_rel_error));
    }
    Ok(out)
}

fn random<R: Rng>(r: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

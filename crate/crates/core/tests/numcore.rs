use avfusion::numcore::{
    gradcheck, gradcheck_extended, Axis, Bindings, GradcheckOptions, Matrix, NumError, Objective, ParamId, ParamSet, Real, Tape,
    Var,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..=1.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn chain() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1usize..=16, 1usize..=16, 1usize..=16, 1usize..=16).prop_flat_map(|(a, b, c, d)| (matrix(a, b), matrix(b, c), matrix(c, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_slices_sum_to_one(
        (r, c, data) in (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c))),
        t_ix in 0usize..3,
    ) {
        let t = [0.01, 0.1, 1.0][t_ix];
        let x = Matrix::new(r, c, data).unwrap();
        let rows = x.softmax_temp(t, Axis::Rows).unwrap();
        for i in 0..r {
            let s: f64 = rows.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        let cols = x.softmax_temp(t, Axis::Cols).unwrap();
        for j in 0..c {
            let s: f64 = cols.column(j).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(rows.data().iter().chain(cols.data()).all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn softmax_temperature_is_a_rescaling(x in matrix(3, 5), t in 0.001f64..10.0) {
        for axis in [Axis::Rows, Axis::Cols] {
            prop_assert_eq!(x.softmax_temp(t, axis).unwrap(), x.map(|v| v / t).softmax_temp(1.0, axis).unwrap());
        }
    }

    #[test]
    fn matmul_is_associative_and_matches_nalgebra((a, b, c) in chain()) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9);
        let oracle = to_na(&a) * to_na(&b) * to_na(&c);
        prop_assert!((to_na(&left) - oracle).abs().max() <= 1e-12);
    }

    #[test]
    fn shapes_follow_the_operations(r in 1usize..10, k in 1usize..10, c in 1usize..10, extra in 0usize..5) {
        let (a, b) = (Matrix::<f64>::zeros(r, k), Matrix::<f64>::zeros(k, c));
        prop_assert_eq!(a.matmul(&b).unwrap().shape(), (r, c));
        prop_assert_eq!(a.transpose().shape(), (k, r));
        prop_assert_eq!(a.concat_rows(&Matrix::zeros(extra, k)).unwrap().shape(), (r + extra, k));
        prop_assert_eq!(a.softmax_temp(0.1, Axis::Cols).unwrap().shape(), (r, k));
        let bad = Matrix::<f64>::zeros(k + 1, c);
        let is_dimension_error = matches!(a.matmul(&bad), Err(NumError::Dimension { .. }));
        prop_assert!(is_dimension_error);
        prop_assert!(a.add(&Matrix::zeros(r, k + 1)).is_err());
        prop_assert!(a.concat_rows(&Matrix::zeros(1, k + 1)).is_err());
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Relu,
    ConcatRows,
    SliceRows,
    SoftmaxRows,
    SoftmaxCols,
    BroadcastRow,
    BroadcastCol,
    ReplicateColumn,
    ShiftRight,
    Sum,
    CccLoss,
    Composite,
}

impl Op {
    const ALL: [Op; 19] = [
        Op::Matmul,
        Op::Transpose,
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Scale,
        Op::Tanh,
        Op::Relu,
        Op::ConcatRows,
        Op::SliceRows,
        Op::SoftmaxRows,
        Op::SoftmaxCols,
        Op::BroadcastRow,
        Op::BroadcastCol,
        Op::ReplicateColumn,
        Op::ShiftRight,
        Op::Sum,
        Op::CccLoss,
        Op::Composite,
    ];

    fn shapes(self) -> Vec<(usize, usize)> {
        match self {
            Op::Matmul => vec![(3, 4), (4, 2)],
            Op::Add | Op::Sub | Op::Mul => vec![(3, 4), (3, 4)],
            Op::ConcatRows => vec![(2, 4), (3, 4)],
            Op::SliceRows | Op::ReplicateColumn => vec![(5, 3)],
            Op::BroadcastRow => vec![(1, 4)],
            Op::BroadcastCol => vec![(3, 1)],
            Op::ShiftRight => vec![(3, 6)],
            Op::CccLoss => vec![(1, 7)],
            Op::Composite => vec![(4, 3), (3, 4), (4, 1)],
            _ => vec![(3, 4)],
        }
    }

    fn apply<T: Real>(self, t: &mut Tape<T>, v: &[Var]) -> Result<Var, NumError> {
        let c = T::from_f64;
        match self {
            Op::Matmul => t.matmul(v[0], v[1]),
            Op::Transpose => Ok(t.transpose(v[0])),
            Op::Add => t.add(v[0], v[1]),
            Op::Sub => t.sub(v[0], v[1]),
            Op::Mul => t.mul(v[0], v[1]),
            Op::Scale => Ok(t.scale(v[0], c(-1.7))),
            Op::Tanh => Ok(t.tanh(v[0])),
            Op::Relu => Ok(t.relu(v[0])),
            Op::ConcatRows => t.concat_rows(v[0], v[1]),
            Op::SliceRows => t.slice_rows(v[0], 1, 3),
            Op::SoftmaxRows => t.softmax_temp(v[0], c(0.1), Axis::Rows),
            Op::SoftmaxCols => t.softmax_temp(v[0], c(0.5), Axis::Cols),
            Op::BroadcastRow => t.broadcast_row(v[0], 3),
            Op::BroadcastCol => t.broadcast_col(v[0], 4),
            Op::ReplicateColumn => t.replicate_column(v[0], 1, 2),
            Op::ShiftRight => Ok(t.shift_right(v[0], 2)),
            Op::Sum => Ok(t.sum(v[0])),
            Op::CccLoss => {
                let truth: Vec<T> = [0.3, -0.2, 0.5, 0.1, -0.7, 0.9, 0.0].map(c).to_vec();
                let mask = [true, true, false, true, true, true, true];
                Ok(t.ccc_loss(v[0], &truth, Some(&mask))?.0)
            }
            Op::Composite => {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h);
                let s = t.softmax_temp(h, c(0.1), Axis::Rows)?;
                let b = t.broadcast_col(v[2], 4)?;
                let m = t.mul(s, b)?;
                let r = t.relu(m);
                t.add(r, h)
            }
        }
    }
}

/// `sum(op(params) ⊙ R)` for a fixed random `R`.
struct OpObjective {
    op: Op,
    ids: Vec<ParamId>,
    weights: Matrix,
}

impl Objective for OpObjective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, b: &Bindings) -> Result<Var, NumError> {
        let vars: Vec<Var> = self.ids.iter().map(|&i| b.var(i)).collect();
        let out = self.op.apply(tape, &vars)?;
        let w = tape.constant(self.weights.cast());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }
}

fn op_gradcheck(op: Op, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let ids: Vec<_> = op
        .shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| params.add(format!("p{i}"), Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))))
        .collect();
    let mut t = Tape::new();
    let b = params.bind_frozen(&mut t);
    let vars: Vec<Var> = ids.iter().map(|&i| b.var(i)).collect();
    let out = op.apply(&mut t, &vars).unwrap();
    let (r, c) = t.shape(out);
    let weights = Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let objective = OpObjective { op, ids, weights };
    gradcheck_extended(&params, &GradcheckOptions::default(), &objective).unwrap().worst()
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    for op in Op::ALL {
        for seed in 0..5 {
            let worst = op_gradcheck(op, seed);
            assert!(worst < 1e-5, "{op:?} seed {seed}: {worst:e}");
        }
    }
}

#[test]
fn plain_gradcheck_agrees_on_unsaturated_ops() {
    let mut params = ParamSet::new();
    let a = params.add("a", Matrix::from_fn(3, 4, |r, c| 0.3 * r as f64 - 0.2 * c as f64));
    let report = gradcheck(&params, &GradcheckOptions::default(), |t: &mut Tape, b: &Bindings| {
        let s = t.softmax_temp(b.var(a), 1.0, Axis::Rows)?;
        let h = t.tanh(s);
        Ok(t.sum(h))
    })
    .unwrap();
    assert!(report.worst() < 1e-5, "{report:?}");
}

#[test]
fn dimension_errors_name_both_shapes() {
    let err = Matrix::<f64>::zeros(2, 3).matmul(&Matrix::zeros(4, 5)).unwrap_err().to_string();
    assert!(err.contains("2x3") && err.contains("4x5"), "{err}");
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Matrix::zeros(1, 3));
    assert!(tape.ccc_loss(a, &[0.0, 1.0], None).is_err());
}

use kvcore::compression::RankSpec;
use kvcore::linalg::sym_eigh;
use kvcore::metrics::{effective_rank, PplGrid};
use kvcore::stream::{read_stream, write_stream, StreamHeader};
use kvcore::{Accumulator, Kind, Matrix};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-100.0f64..100.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn max_rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE)
}

fn accumulate(m: &Matrix, from: usize, to: usize) -> Accumulator {
    let mut acc = Accumulator::new(m.cols()).unwrap();
    for r in from..to {
        acc.ingest_row(m.row(r)).unwrap();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stream_round_trip_is_bit_exact(
        rows in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 5), 0..40),
        layer in 0u32..100,
        key in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.kvcr");
        let kind = if key { Kind::Key } else { Kind::Value };
        let header = StreamHeader::new(layer, kind, 5, rows.len() as u64);
        write_stream(&path, header, rows.clone()).unwrap();
        let stream = read_stream(&path).unwrap();
        prop_assert_eq!(*stream.header(), header);
        let back: Vec<Vec<f32>> = stream.collect::<kvcore::Result<_>>().unwrap();
        let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&rows));
    }

    #[test]
    fn accumulation_is_a_commutative_monoid(m in matrix(60, 8), a in 0usize..=60, b in 0usize..=60) {
        let n = m.rows();
        let (a, b) = (a.min(n).min(b.min(n)), a.min(n).max(b.min(n)));
        let whole = accumulate(&m, 0, n);
        let (x, y, z) = (accumulate(&m, 0, a), accumulate(&m, a, b), accumulate(&m, b, n));
        let left = x.clone().merge(&y).unwrap().merge(&z).unwrap();
        let right = x.clone().merge(&y.clone().merge(&z).unwrap()).unwrap();
        let swapped = z.clone().merge(&x).unwrap().merge(&y).unwrap();
        for acc in [&left, &right, &swapped] {
            prop_assert!(max_rel_diff(acc.gram(), whole.gram()) <= 1e-12);
            prop_assert_eq!(acc.tokens_seen(), n as u64);
        }
        let zero = Accumulator::new(m.cols()).unwrap();
        prop_assert_eq!(whole.clone().merge(&zero).unwrap(), whole.clone());
        prop_assert_eq!(x.clone().merge(&y).unwrap(), y.clone().merge(&x).unwrap());
    }

    #[test]
    fn effective_rank_is_bounded_and_scale_free(
        sigma in prop::collection::vec(1e-6f64..1e6, 1..40),
        c in 1e-3f64..1e3,
    ) {
        let mut sigma = sigma;
        sigma.sort_by(|a, b| b.total_cmp(a));
        let r = sigma.len();
        let e = effective_rank(&sigma, r).unwrap();
        let ner = e / r as f64;
        prop_assert!(ner >= 1.0 / r as f64 - 1e-12 && ner <= 1.0 + 1e-12);
        let scaled: Vec<f64> = sigma.iter().map(|s| s * c).collect();
        prop_assert!((effective_rank(&scaled, r).unwrap() - e).abs() <= 1e-10 * e);
    }

    #[test]
    fn eigendecomposition_reconstructs(m in matrix(12, 12)) {
        let a = m.gram();
        let eig = sym_eigh(&a).unwrap();
        let v = &eig.eigenvectors;
        let n = a.rows();
        prop_assert!(v.transpose().matmul(v).unwrap().max_abs_diff(&Matrix::identity(n)) <= 1e-10);
        prop_assert!(eig.reconstruct().max_abs_diff(&a) <= 1e-10 * a.max_abs().max(1.0));
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn ratio_resolution_is_monotone(dim in 1usize..512, r1 in 0.001f64..=1.0, r2 in 0.001f64..=1.0) {
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let (a, b) = (RankSpec::Ratio(lo).resolve(dim).unwrap(), RankSpec::Ratio(hi).resolve(dim).unwrap());
        prop_assert!(1 <= a && a <= b && b <= dim);
        prop_assert!(a as f64 >= lo * dim as f64 - 1e-9 * dim as f64);
        prop_assert_eq!(RankSpec::Ratio(1.0).resolve(dim).unwrap(), dim);
    }

    #[test]
    fn grid_csv_round_trips(ppl in prop::collection::vec(1.0f64..1e4, 6)) {
        let g = PplGrid::new(vec![0.25, 0.5, 1.0], vec![0.5, 1.0], ppl).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        prop_assert_eq!(PplGrid::read_csv(&buf[..]).unwrap(), g);
    }
}

mod common;

use common::*;
use pbmr::tensor::{Graph, Tensor};

#[test]
fn every_op_matches_central_differences() {
    for (op, stats) in op_checks(101, 6) {
        assert!(stats.passes(), "{op}: {stats:?}");
    }
}

#[test]
fn tiny_network_matches_central_differences() {
    let stats = network_checks(7, 3, 12);
    assert!(stats.passes(), "{stats:?}");
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut w = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.7, 0.2, 0.9, -0.3]).unwrap().with_grad();
    let mut b = Tensor::new(vec![2], vec![0.05, -0.02]).unwrap().with_grad();
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let (wv, bv) = (g.param(&mut w), g.param(&mut b));
    let xv = g.constant(&x);
    let y = g.linear(xv, wv, bv).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    drop(g);
    assert_eq!(w.grad().unwrap(), &[2.0, 4.0, -2.0, 2.0, 4.0, -2.0]);
    assert_eq!(b.grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut used = Tensor::new(vec![1], vec![3.0]).unwrap().with_grad();
    let mut unused = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap().with_grad();
    let mut g = Graph::<f64>::new();
    let u = g.param(&mut used);
    g.param(&mut unused);
    let loss = g.sum(u);
    g.backward(loss).unwrap();
    drop(g);
    assert_eq!(unused.grad().unwrap(), &[0.0, 0.0]);
    assert_eq!(used.grad().unwrap(), &[1.0]);
}

#[test]
fn max_pool_tie_goes_to_first_element() {
    let mut x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 5.0, 2.0]).unwrap().with_grad();
    let mut g = Graph::<f64>::new();
    let xv = g.param(&mut x);
    let m = g.adaptive_max_pool(xv).unwrap();
    let loss = g.sum(m);
    g.backward(loss).unwrap();
    drop(g);
    assert_eq!(x.grad().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn l1_subgradient_at_zero_is_zero() {
    let mut p = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap().with_grad();
    let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let pv = g.param(&mut p);
    let tv = g.constant(&t);
    let loss = g.l1_loss(pv, tv).unwrap();
    g.backward(loss).unwrap();
    drop(g);
    assert_eq!(p.grad().unwrap(), &[0.0, 0.5]);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.constant(&x);
    assert!(g.backward(xv).is_err());
}

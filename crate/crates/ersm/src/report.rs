//! CSV renderings of training logs and evaluation results. Floats use the
//! shortest representation that round-trips.

use std::fmt::Write;

use ersm_core::evaluation::{AlignmentReport, RobustnessCurve, SparsityReport};
use ersm_core::training::{EpochMetrics, GridReport, MASK_BINS};

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lce,lreg,ltotal,train_acc,test_acc,mean_mask");
    for i in 0..MASK_BINS {
        write!(s, ",hist_{i}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{},{},{},{},{}", r.epoch, r.lce, r.lreg, r.ltotal, r.train_acc, r.test_acc, r.mean_mask)
            .unwrap();
        for h in r.mask_hist {
            write!(s, ",{h}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn curves_csv(curves: &[&RobustnessCurve]) -> String {
    let mut s = String::from("policy,k,accuracy,stderr\n");
    for c in curves {
        for p in &c.points {
            writeln!(s, "{},{},{},{}", c.policy.name(), p.k, p.accuracy, p.stderr).unwrap();
        }
    }
    s
}

pub fn sparsity_csv(r: &SparsityReport) -> String {
    let mut s = String::from("image,mean_mask\n");
    for (i, m) in r.per_image.iter().enumerate() {
        writeln!(s, "{i},{m}").unwrap();
    }
    s
}

pub fn alignment_csv(r: &AlignmentReport) -> String {
    let mut s = String::from("image,keep_fraction,retained,iou,random_iou\n");
    for (i, (a, b)) in r.per_image.iter().zip(&r.baseline_per_image).enumerate() {
        writeln!(s, "{i},{},{},{a},{b}", r.keep_fraction, r.retained).unwrap();
    }
    s
}

pub fn grid_csv(report: &GridReport) -> String {
    let mut s = String::from("lambda_unary,lambda_pair,peak_test_acc,mean_mask,error\n");
    for c in &report.cells {
        match &c.outcome {
            Ok(o) => writeln!(s, "{},{},{},{},", c.lambda_unary, c.lambda_pair, o.peak_test_acc, o.mean_mask),
            Err(e) => writeln!(s, "{},{},,,\"{}\"", c.lambda_unary, c.lambda_pair, e.to_string().replace('"', "'")),
        }
        .unwrap();
    }
    s
}

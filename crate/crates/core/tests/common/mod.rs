//! Random problem generators shared by the integration tests.
#![allow(dead_code)]

use icopt::kernelspec::{parse_problem, ProblemSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn num(v: f64) -> String {
    format!("({v:.15})")
}

fn u(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> String {
    num(rng.random_range(lo..hi))
}

fn settings(n: usize, rule: &str) -> String {
    format!(r#"{{"grid_n":{n},"rule":"{rule}"}}"#)
}

pub fn parse(text: &str) -> ProblemSpec {
    parse_problem(text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

/// Scalar (`n = 1`) or `n = 2` quadratic form with a dominant `K1`.
pub fn quadform(rng: &mut ChaCha8Rng, n: usize, grid_n: usize) -> ProblemSpec {
    let kernels = if n == 1 {
        format!(
            r#""K1":[["{} + {}*x^2"]],"K2":[["{}*exp(-{}*(x-y)^2) + {}*cos(x)*cos(y)"]],"r0":[["{}*sin({}*x) + {}"]]"#,
            u(rng, 1.0, 2.0),
            u(rng, 0.0, 1.0),
            u(rng, -0.5, 0.5),
            u(rng, 0.5, 3.0),
            u(rng, -0.3, 0.3),
            u(rng, -1.0, 1.0),
            u(rng, 0.5, 4.0),
            u(rng, -0.5, 0.5),
        )
    } else {
        let b = u(rng, -0.4, 0.4);
        let c2 = u(rng, -0.3, 0.3);
        format!(
            r#""K1":[["{}","{b}*x"],["{b}*x","{}"]],
               "K2":[["{}*exp(-(x-y)^2)","{c2}*x*y"],["{c2}*x*y","{}*cos(x-y)"]],
               "r0":[["{}*x + {}"],["{}*cos({}*x)"]]"#,
            u(rng, 1.0, 2.0),
            u(rng, 1.0, 2.0),
            u(rng, -0.5, 0.5),
            u(rng, -0.5, 0.5),
            u(rng, -1.0, 1.0),
            u(rng, -0.5, 0.5),
            u(rng, -1.0, 1.0),
            u(rng, 0.5, 3.0),
        )
    };
    parse(&format!(
        r#"{{"kind":"QuadForm","domain":{{"a":0,"b":1}},"dims":{{"n":{n},"m":{n}}},"kernels":{{{kernels}}},"settings":{}}}"#,
        settings(grid_n, "trapezoid")
    ))
}

/// Fredholm LQ problem with a contractive `A` and a convex cost.
pub fn fredholm_lq(rng: &mut ChaCha8Rng, n: usize, grid_n: usize, rule: &str) -> ProblemSpec {
    let kernels = if n == 1 {
        format!(
            r#""A":[["{}*exp(-{}*x*y)"]],"B":[["{} + {}*x*y"]],"phi0":[["{}*cos({}*x) + {}"]],
               "P":[["{}"]],"Q":[["{}*x"]],"R":[["{} + x^2"]]"#,
            u(rng, -0.6, 0.6),
            u(rng, 0.0, 2.0),
            u(rng, 0.5, 1.5),
            u(rng, -0.5, 0.5),
            u(rng, 0.5, 1.5),
            u(rng, 0.5, 3.0),
            u(rng, -0.5, 0.5),
            u(rng, 0.5, 1.5),
            u(rng, -0.2, 0.2),
            u(rng, 1.0, 2.0),
        )
    } else {
        format!(
            r#""A":[["{}*x*y","{}"],["{}*cos(x-y)","{}"]],"B":[["{} + {}*x*y"],["sin(x + y)"]],
               "phi0":[["1 + {}*x"],["exp(-x)"]],"P":[["1","{}"],["{}","0.5"]],"Q":[["0"],["{}"]],"R":[["{}"]]"#,
            u(rng, -0.3, 0.3),
            u(rng, -0.2, 0.2),
            u(rng, -0.2, 0.2),
            u(rng, -0.3, 0.3),
            u(rng, 0.3, 1.0),
            u(rng, -0.3, 0.3),
            u(rng, -1.0, 1.0),
            "0.2",
            "0.2",
            u(rng, -0.1, 0.1),
            u(rng, 1.0, 2.0),
        )
    };
    let m = 1;
    parse(&format!(
        r#"{{"kind":"FredholmLQ","domain":{{"a":0,"b":1}},"dims":{{"n":{n},"m":{m}}},"kernels":{{{kernels}}},"settings":{}}}"#,
        settings(grid_n, rule)
    ))
}

/// Smooth Volterra LQ problem on `[0, 1]` with `m = 1`.
pub fn volterra_lq(rng: &mut ChaCha8Rng, n: usize, grid_n: usize, rule: &str) -> ProblemSpec {
    let kernels = if n == 1 {
        format!(
            r#""A":[["{}*exp(-{}*(t-s))"]],"B":[["{} + {}*t*s"]],"y0":[["{} + {}*t"]],
               "P":[["{}"]],"Q":[["{}"]],"R":[["{}"]]"#,
            u(rng, -1.0, 1.0),
            u(rng, 0.0, 2.0),
            u(rng, 0.5, 1.5),
            u(rng, -0.5, 0.5),
            u(rng, 0.5, 1.5),
            u(rng, -1.0, 1.0),
            u(rng, 0.5, 1.5),
            u(rng, -0.2, 0.2),
            u(rng, 0.5, 1.5),
        )
    } else {
        format!(
            r#""A":[["{}","1"],["{}","{}*t"]],"B":[["{}*s"],["1 + {}*s"]],"y0":[["1"],["{}"]],
               "P":[["1","0"],["0","{}"]],"Q":[["0"],["0"]],"R":[["{}"]]"#,
            u(rng, -0.5, 0.5),
            u(rng, -1.0, 0.0),
            u(rng, -0.3, 0.3),
            u(rng, -0.3, 0.3),
            u(rng, -0.3, 0.3),
            u(rng, -0.5, 0.5),
            u(rng, 0.2, 1.0),
            u(rng, 0.3, 1.0),
        )
    };
    parse(&format!(
        r#"{{"kind":"VolterraLQ","domain":{{"a":0,"b":1}},"dims":{{"n":{n},"m":1}},"kernels":{{{kernels}}},"settings":{}}}"#,
        settings(grid_n, rule)
    ))
}

/// Composite Simpson rule with `2k` panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, k: usize) -> f64 {
    let n = 2 * k;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Nonlinear problem with a known optimal pair `(φ̂, ψ̂)`.
///
/// Kernels are separable, so the integrals the optimality system needs reduce
/// to four constants computed here by Simpson's rule. `φ₀` is chosen so the
/// state equation holds at `(φ̂, û)` and the linear part of `g₀` so the
/// costate equation holds at `ψ̂`.
pub struct Manufactured {
    pub spec: ProblemSpec,
    pub phi_hat: fn(f64) -> f64,
    pub psi_hat: fn(f64) -> f64,
}

pub fn manufactured(grid_n: usize) -> Manufactured {
    let (a, b, c, d, e) = (0.3, 0.4, 0.2, 0.1, 0.5);
    let phi_hat: fn(f64) -> f64 = |x| 1.0 + 0.5 * x;
    let psi_hat: fn(f64) -> f64 = |x| 0.2 + 0.1 * x * x;
    let k = 20_000;
    let i1 = simpson(|z| z.cos() * psi_hat(z), 0.0, 1.0, k);
    let u_hat = |y: f64| {
        let p = phi_hat(y);
        -(e * p + b * (1.0 + c * p) * i1) / (1.0 + d * p * p)
    };
    let i2 = simpson(|y| y * phi_hat(y).sin(), 0.0, 1.0, k);
    let i3 = simpson(|y| (1.0 + c * phi_hat(y)) * u_hat(y), 0.0, 1.0, k);
    let i4 = simpson(|y| y * psi_hat(y), 0.0, 1.0, k);
    let ph = "(1 + 0.5*x)";
    let ps = "(0.2 + 0.1*x^2)";
    let uh = format!("(-({e}*{ph} + {b}*(1 + {c}*{ph})*{})/(1 + {d}*{ph}^2))", num(i1));
    let s = format!(
        "({ps} - {ph} - {e}*{uh} - {d}*{ph}*{uh}^2 - {a}*x*cos({ph})*{} - {}*{}*{uh})",
        num(i4),
        b * c,
        num(i1)
    );
    let phi0 = format!("{ph} - {a}*x*{} - {b}*cos(x)*{}", num(i2), num(i3));
    let text = format!(
        r#"{{"kind":"NonlinearFredholm","domain":{{"a":0,"b":1}},"dims":{{"n":1,"m":1}},
        "kernels":{{"phi0":[["{phi0}"]],"f":[["{a}*x*y*sin(phi)"]],"F":[["{b}*cos(x)*(1 + {c}*phi)"]],
        "g0":[["0.5*phi^2 + {s}*phi"]],"g1":[["{e}*phi"]],"G":[["1 + {d}*phi^2"]],
        "grad_f":[["{a}*x*y*cos(phi)"]],"grad_g0":[["phi + {s}"]],"grad_g1":[["{e}"]],
        "grad_F1":[["{}*cos(x)"]],"grad_G1":[["{}*phi"]]}},
        "settings":{{"grid_n":{grid_n},"rule":"gauss","tol":1e-12,"max_iter":500}}}}"#,
        b * c,
        2.0 * d
    );
    Manufactured {
        spec: parse(&text),
        phi_hat,
        psi_hat,
    }
}

/// Reads a file from the golden corpus.
pub fn corpus(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn corpus_files() -> Vec<std::path::PathBuf> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    v.sort();
    v
}

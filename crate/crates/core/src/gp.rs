//! Gaussian-process models over envelope parameters and wavelet
//! coefficients.
//!
//! All outputs share one covariance form: a linear-in-features term handled
//! in weight space, a stationary Matern-3/2 term over great-circle distance,
//! and iid noise tied to training-instance identity. Training data is
//! partitioned into spatial regions by k-means; the Matern component factors
//! into independent regional models while the feature weights are fit
//! globally and shared across regions.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geophys::great_circle_km;
use crate::linalg::{dot, mvn_log_pdf, Cholesky, Mat};
use crate::numeric::LN_2PI;
use crate::Result;

/// Scalar hyperparameters of one regional GP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Matern signal variance.
    pub sigma_f2: f64,
    /// Matern lengthscale, kilometers.
    pub lengthscale_km: f64,
    /// iid noise variance.
    pub sigma_n2: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            sigma_f2: 1.0,
            lengthscale_km: 100.0,
            sigma_n2: 0.1,
        }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_f2 < 0.0 || !(self.sigma_n2 > 0.0) || !(self.lengthscale_km > 0.0) {
            return Err(Error::config("invalid GP hyperparameters"));
        }
        Ok(())
    }
}

/// Matern-3/2 correlation at distance `d`.
pub fn matern32(d_km: f64, lengthscale_km: f64) -> f64 {
    let s = 3.0_f64.sqrt() * d_km / lengthscale_km;
    (1.0 + s) * (-s).exp()
}

/// Feature representation per output family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Arrival time and wavelet coefficients: no features.
    None,
    /// Amplitude: (1, dist, sin(dist/15000), cos(dist/15000)), dist in km.
    Amplitude,
    /// Onset: (1, mb).
    Onset,
    /// Peak/coda decay: (1, mb, dist).
    Decay,
}

impl FeatureKind {
    pub fn dim(&self) -> usize {
        match self {
            FeatureKind::None => 0,
            FeatureKind::Amplitude => 4,
            FeatureKind::Onset => 2,
            FeatureKind::Decay => 3,
        }
    }

    pub fn eval(&self, mb: f64, dist_km: f64) -> Vec<f64> {
        match self {
            FeatureKind::None => vec![],
            FeatureKind::Amplitude => vec![
                1.0,
                dist_km,
                (dist_km / 15000.0).sin(),
                (dist_km / 15000.0).cos(),
            ],
            FeatureKind::Onset => vec![1.0, mb],
            FeatureKind::Decay => vec![1.0, mb, dist_km],
        }
    }

    /// Characteristic scale of each feature, used to set weight priors.
    fn scales(&self) -> Vec<f64> {
        match self {
            FeatureKind::None => vec![],
            FeatureKind::Amplitude => vec![1.0, 1000.0, 1.0, 1.0],
            FeatureKind::Onset => vec![1.0, 1.0],
            FeatureKind::Decay => vec![1.0, 1.0, 1000.0],
        }
    }

    /// Default diagonal prior covariance over feature weights.
    pub fn default_weight_prior(&self, weight_scale: f64) -> Mat {
        let scales = self.scales();
        let mut b = Mat::zeros(scales.len(), scales.len());
        for (i, s) in scales.iter().enumerate() {
            let sd = weight_scale / s;
            b[(i, i)] = sd * sd;
        }
        b
    }
}

/// GP input point: an event's surface location plus the derived
/// event-station quantities the feature maps use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpInput {
    pub lon: f64,
    pub lat: f64,
    pub mb: f64,
    pub dist_km: f64,
}

impl GpInput {
    pub fn features(&self, kind: FeatureKind) -> Vec<f64> {
        kind.eval(self.mb, self.dist_km)
    }
}

/// The shared covariance: feature term + Matern + instance noise. The noise
/// term applies only when `same_instance` (training identity, not location
/// equality).
pub fn covariance(
    a: &GpInput,
    b: &GpInput,
    same_instance: bool,
    hyper: &GpHyper,
    feature: FeatureKind,
    weight_cov: &Mat,
) -> f64 {
    let mut k = 0.0;
    if feature.dim() > 0 {
        let fa = a.features(feature);
        let fb = b.features(feature);
        k += dot(&fa, &weight_cov.matvec(&fb));
    }
    let d = great_circle_km(a.lon, a.lat, b.lon, b.lat);
    k += hyper.sigma_f2 * matern32(d, hyper.lengthscale_km);
    if same_instance {
        k += hyper.sigma_n2;
    }
    k
}

// ---------------------------------------------------------------------------
// Regional partitioning (k-means on the sphere)
// ---------------------------------------------------------------------------

fn unit_vec(lon: f64, lat: f64) -> [f64; 3] {
    let (lam, phi) = (lon.to_radians(), lat.to_radians());
    [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Lloyd's k-means over 3-D unit-vector embeddings of surface locations,
/// k-means++ seeded, run to an assignment fixpoint (at most 100 rounds).
/// Returns per-point region assignments and region centroids.
pub fn partition_regions(
    points: &[(f64, f64)],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<(f64, f64)>)> {
    let n = points.len();
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds {n} points")));
    }
    let xs: Vec<[f64; 3]> = points.iter().map(|&(lo, la)| unit_vec(lo, la)).collect();

    // k-means++ seeding
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(k);
    centers.push(xs[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = xs.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a center; pick any
            // unchosen index deterministically
            (0..n).find(|&i| d2[i] > 0.0).unwrap_or(rng.random_range(0..n))
        } else {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(xs[next]);
        for (i, x) in xs.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![0usize; n];
    for _round in 0..100 {
        let mut changed = false;
        for (i, x) in xs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(x, ctr);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed && _round > 0 {
            break;
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            let mut count = 0;
            for (i, x) in xs.iter().enumerate() {
                if assignment[i] == c {
                    acc[0] += x[0];
                    acc[1] += x[1];
                    acc[2] += x[2];
                    count += 1;
                }
            }
            if count > 0 {
                let norm = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
                if norm > 1e-12 {
                    *ctr = [acc[0] / norm, acc[1] / norm, acc[2] / norm];
                }
            }
        }
    }
    let centroids = centers
        .iter()
        .map(|c| {
            let lat = c[2].clamp(-1.0, 1.0).asin().to_degrees();
            let lon = c[1].atan2(c[0]).to_degrees();
            (crate::worldmodel::wrap_lon(lon), lat)
        })
        .collect();
    Ok((assignment, centroids))
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting
// ---------------------------------------------------------------------------

/// Fitting configuration: log-uniform search boxes and restart budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitConfig {
    pub lengthscale_bounds_km: (f64, f64),
    pub variance_bounds: (f64, f64),
    pub restarts: usize,
    pub max_iters: usize,
    /// Scale of the default feature-weight prior.
    pub weight_scale: f64,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            lengthscale_bounds_km: (5.0, 5000.0),
            variance_bounds: (1e-6, 1e3),
            restarts: 5,
            max_iters: 120,
            weight_scale: 5.0,
        }
    }
}

/// One region's training data for hyperparameter fitting: zero-mean targets
/// with known per-point noise variances.
#[derive(Debug, Clone)]
pub struct RegionData<'a> {
    pub inputs: &'a [GpInput],
    /// Residual targets (messages minus mean function minus feature part).
    pub y: &'a [f64],
    /// Per-point message variances added to the diagonal.
    pub xi: &'a [f64],
}

/// Marginal log-likelihood of the region under `hyper` and its gradient
/// with respect to (log sigma_f2, log lengthscale, log sigma_n2).
pub fn log_marginal_and_grad(data: &RegionData, hyper: &GpHyper) -> Result<(f64, [f64; 3])> {
    let n = data.inputs.len();
    assert_eq!(data.y.len(), n);
    assert_eq!(data.xi.len(), n);
    let mut dists = Mat::zeros(n, n);
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d = great_circle_km(
                data.inputs[i].lon,
                data.inputs[i].lat,
                data.inputs[j].lon,
                data.inputs[j].lat,
            );
            dists[(i, j)] = d;
            dists[(j, i)] = d;
            let v = hyper.sigma_f2 * matern32(d, hyper.lengthscale_km);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hyper.sigma_n2 + data.xi[i];
    }
    let (chol, _) = Cholesky::with_jitter(&k, 1e-8)?;
    let alpha = chol.solve(data.y);
    let quad = dot(data.y, &alpha);
    let ll = -0.5 * (quad + chol.log_det() + n as f64 * LN_2PI);

    let kinv = chol.inverse();
    // dK matrices for the three log-parameters
    let root3 = 3.0_f64.sqrt();
    let mut grad = [0.0_f64; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let d = dists[(i, j)];
            let m = matern32(d, hyper.lengthscale_km);
            // d/d log sigma_f2
            let dk_f = hyper.sigma_f2 * m;
            // d/d log lengthscale: sigma_f2 * exp(-s) * 3 d^2 / l^3 * l
            let s = root3 * d / hyper.lengthscale_km;
            let dk_l = hyper.sigma_f2
                * (-s).exp()
                * (3.0 * d * d / (hyper.lengthscale_km * hyper.lengthscale_km));
            // d/d log sigma_n2
            let dk_n = if i == j { hyper.sigma_n2 } else { 0.0 };
            grad[0] += 0.5 * w * dk_f;
            grad[1] += 0.5 * w * dk_l;
            grad[2] += 0.5 * w * dk_n;
        }
    }
    Ok((ll, grad))
}

/// Outcome of a hyperparameter fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective: f64,
    pub init_objective: f64,
    /// True when every optimization attempt failed and defaults were used.
    pub failed: bool,
}

fn clamp_hyper(log_p: &mut [f64; 3], config: &GpFitConfig) {
    let (vlo, vhi) = config.variance_bounds;
    let (llo, lhi) = config.lengthscale_bounds_km;
    log_p[0] = log_p[0].clamp(vlo.ln(), vhi.ln());
    log_p[1] = log_p[1].clamp(llo.ln(), lhi.ln());
    log_p[2] = log_p[2].clamp(vlo.ln(), vhi.ln());
}

fn hyper_from_log(log_p: &[f64; 3]) -> GpHyper {
    GpHyper {
        sigma_f2: log_p[0].exp(),
        lengthscale_km: log_p[1].exp(),
        sigma_n2: log_p[2].exp(),
    }
}

/// Maximize the regional marginal likelihood over log-hyperparameters by
/// projected gradient ascent with an adaptive step, multi-restart. Returns
/// hyperparameters whose objective is at least the init's.
pub fn fit_hyperparameters(
    data: &RegionData,
    init: &GpHyper,
    config: &GpFitConfig,
    rng: &mut ChaCha8Rng,
) -> (GpHyper, FitReport) {
    if data.inputs.len() < 2 {
        return (
            *init,
            FitReport {
                objective: f64::NAN,
                init_objective: f64::NAN,
                failed: false,
            },
        );
    }
    let init_obj = log_marginal_and_grad(data, init).map(|(l, _)| l);
    let mut best_hyper = *init;
    let mut best_obj = match init_obj {
        Ok(l) => l,
        Err(_) => f64::NEG_INFINITY,
    };
    let init_objective = best_obj;
    let mut any_ok = init_obj.is_ok();

    let (vlo, vhi) = config.variance_bounds;
    let (llo, lhi) = config.lengthscale_bounds_km;
    for restart in 0..config.restarts.max(1) {
        let mut log_p = if restart == 0 {
            [
                init.sigma_f2.ln(),
                init.lengthscale_km.ln(),
                init.sigma_n2.ln(),
            ]
        } else {
            [
                rng.random_range(vlo.ln()..vhi.ln()),
                rng.random_range(llo.ln()..lhi.ln()),
                rng.random_range(vlo.ln()..vhi.ln()),
            ]
        };
        clamp_hyper(&mut log_p, config);
        let mut cur = match log_marginal_and_grad(data, &hyper_from_log(&log_p)) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let mut step = 0.1;
        for _ in 0..config.max_iters {
            let gnorm = cur.1.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-8 || step < 1e-10 {
                break;
            }
            let mut cand = [
                log_p[0] + step * cur.1[0] / gnorm.max(1.0),
                log_p[1] + step * cur.1[1] / gnorm.max(1.0),
                log_p[2] + step * cur.1[2] / gnorm.max(1.0),
            ];
            clamp_hyper(&mut cand, config);
            match log_marginal_and_grad(data, &hyper_from_log(&cand)) {
                Ok(next) if next.0 > cur.0 => {
                    log_p = cand;
                    cur = next;
                    step = (step * 1.5).min(2.0);
                }
                _ => step *= 0.5,
            }
        }
        any_ok = true;
        if cur.0 > best_obj {
            best_obj = cur.0;
            best_hyper = hyper_from_log(&log_p);
        }
    }
    let failed = !any_ok;
    (
        if failed { *init } else { best_hyper },
        FitReport {
            objective: best_obj,
            init_objective,
            failed,
        },
    )
}

// ---------------------------------------------------------------------------
// Fitted per-output model
// ---------------------------------------------------------------------------

/// One region of a fitted output model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub centroid: (f64, f64),
    pub inputs: Vec<GpInput>,
    /// Residual targets after mean function and fitted feature weights.
    pub targets: Vec<f64>,
    /// Per-point noise (message variances).
    pub xi: Vec<f64>,
    pub hyper: GpHyper,
    chol: Option<Cholesky>,
    alpha: Vec<f64>,
}

impl Region {
    fn finalize(&mut self) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            self.chol = None;
            self.alpha.clear();
            return Ok(());
        }
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let d = great_circle_km(
                    self.inputs[i].lon,
                    self.inputs[i].lat,
                    self.inputs[j].lon,
                    self.inputs[j].lat,
                );
                let v = self.hyper.sigma_f2 * matern32(d, self.hyper.lengthscale_km);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += self.hyper.sigma_n2 + self.xi[i];
        }
        let (chol, _) = Cholesky::with_jitter(&k, 1e-8)?;
        self.alpha = chol.solve(&self.targets);
        self.chol = Some(chol);
        Ok(())
    }
}

/// Fitted GP model for one scalar output at one (station, phase):
/// global feature weights plus independent regional Matern models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputModel {
    pub feature: FeatureKind,
    /// Prior weight covariance.
    pub weight_prior: Mat,
    /// Posterior weight mean after the global weight-space fit.
    pub weight_mean: Vec<f64>,
    /// Posterior weight covariance; used as B at test time.
    pub weight_cov: Mat,
    pub regions: Vec<Region>,
}

impl OutputModel {
    /// Prior-only model with no training data: one empty region with the
    /// given hyperparameters.
    pub fn prior_default(feature: FeatureKind, hyper: GpHyper, config: &GpFitConfig) -> Self {
        let b0 = feature.default_weight_prior(config.weight_scale);
        OutputModel {
            feature,
            weight_prior: b0.clone(),
            weight_mean: vec![0.0; feature.dim()],
            weight_cov: b0,
            regions: vec![Region {
                centroid: (0.0, 0.0),
                inputs: Vec::new(),
                targets: Vec::new(),
                xi: Vec::new(),
                hyper,
                chol: None,
                alpha: Vec::new(),
            }],
        }
    }

    /// Fit from messages: `nu`/`xi` are the per-event message means and
    /// variances, `mean` the physics mean-function values. Regions follow
    /// the provided assignment; hyperparameters are optimized per region;
    /// feature weights are fit globally in weight space.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        feature: FeatureKind,
        inputs: &[GpInput],
        mean: &[f64],
        nu: &[f64],
        xi: &[f64],
        assignment: &[usize],
        centroids: &[(f64, f64)],
        config: &GpFitConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = inputs.len();
        if mean.len() != n || nu.len() != n || xi.len() != n || assignment.len() != n {
            return Err(Error::dimension("output model fit: length mismatch"));
        }
        let b0 = feature.default_weight_prior(config.weight_scale);
        let mut model = OutputModel {
            feature,
            weight_prior: b0.clone(),
            weight_mean: vec![0.0; feature.dim()],
            weight_cov: b0,
            regions: centroids
                .iter()
                .map(|&c| Region {
                    centroid: c,
                    inputs: Vec::new(),
                    targets: Vec::new(),
                    xi: Vec::new(),
                    hyper: GpHyper::default(),
                    chol: None,
                    alpha: Vec::new(),
                })
                .collect(),
        };
        let mut region_members: Vec<Vec<usize>> = vec![Vec::new(); centroids.len()];
        for (i, &r) in assignment.iter().enumerate() {
            region_members[r].push(i);
        }

        // two coordinate rounds: weights given residual variances, then
        // regional hyperparameters given weights
        let mut point_var: Vec<f64> = xi
            .iter()
            .map(|&x| x + GpHyper::default().sigma_f2 + GpHyper::default().sigma_n2)
            .collect();
        for _round in 0..2 {
            model.fit_weights(inputs, mean, nu, &point_var)?;
            // regional residuals
            for (r, members) in region_members.iter().enumerate() {
                let reg_inputs: Vec<GpInput> = members.iter().map(|&i| inputs[i]).collect();
                let reg_y: Vec<f64> = members
                    .iter()
                    .map(|&i| nu[i] - mean[i] - model.feature_mean(&inputs[i]))
                    .collect();
                let reg_xi: Vec<f64> = members.iter().map(|&i| xi[i]).collect();
                let data = RegionData {
                    inputs: &reg_inputs,
                    y: &reg_y,
                    xi: &reg_xi,
                };
                let (hyper, _report) =
                    fit_hyperparameters(&data, &GpHyper::default(), config, rng);
                let region = &mut model.regions[r];
                region.inputs = reg_inputs;
                region.targets = reg_y;
                region.xi = reg_xi;
                region.hyper = hyper;
            }
            for (i, &r) in assignment.iter().enumerate() {
                point_var[i] =
                    xi[i] + model.regions[r].hyper.sigma_f2 + model.regions[r].hyper.sigma_n2;
            }
        }
        for region in &mut model.regions {
            region.finalize()?;
        }
        Ok(model)
    }

    fn feature_mean(&self, x: &GpInput) -> f64 {
        if self.feature.dim() == 0 {
            0.0
        } else {
            dot(&x.features(self.feature), &self.weight_mean)
        }
    }

    /// Global weight-space posterior given per-point residual variances.
    fn fit_weights(
        &mut self,
        inputs: &[GpInput],
        mean: &[f64],
        nu: &[f64],
        point_var: &[f64],
    ) -> Result<()> {
        let p = self.feature.dim();
        if p == 0 {
            return Ok(());
        }
        let prior_chol = Cholesky::new(&self.weight_prior)
            .map_err(|_| Error::config("weight prior must be positive definite"))?;
        let mut precision = prior_chol.inverse();
        let mut rhs = vec![0.0; p];
        for (i, x) in inputs.iter().enumerate() {
            let f = x.features(self.feature);
            let w = 1.0 / point_var[i];
            for a in 0..p {
                for b in 0..p {
                    precision[(a, b)] += w * f[a] * f[b];
                }
                rhs[a] += w * f[a] * (nu[i] - mean[i]);
            }
        }
        let chol = Cholesky::with_jitter(&precision, 1e-8)?.0;
        self.weight_mean = chol.solve(&rhs);
        self.weight_cov = chol.inverse();
        Ok(())
    }

    fn nearest_region(&self, x: &GpInput) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (r, region) in self.regions.iter().enumerate() {
            let d = great_circle_km(x.lon, x.lat, region.centroid.0, region.centroid.1);
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        best
    }

    /// GP posterior at a test input. `mean_value` is the physics mean
    /// function evaluated at the test point (0 for zero-mean outputs).
    /// Conditions only on the test point's region; variance is floored at
    /// sigma_n2.
    pub fn predict(&self, x: &GpInput, mean_value: f64) -> (f64, f64) {
        let r = self.nearest_region(x);
        let region = &self.regions[r];
        let mut mean = mean_value + self.feature_mean(x);
        let mut var = region.hyper.sigma_f2 + region.hyper.sigma_n2;
        if self.feature.dim() > 0 {
            let f = x.features(self.feature);
            var += dot(&f, &self.weight_cov.matvec(&f));
        }
        if let Some(chol) = &region.chol {
            let kstar: Vec<f64> = region
                .inputs
                .iter()
                .map(|xi| {
                    region.hyper.sigma_f2
                        * matern32(
                            great_circle_km(x.lon, x.lat, xi.lon, xi.lat),
                            region.hyper.lengthscale_km,
                        )
                })
                .collect();
            mean += dot(&kstar, &region.alpha);
            let v = chol.solve(&kstar);
            var -= dot(&kstar, &v);
        }
        (mean, var.max(region.hyper.sigma_n2))
    }

    /// Exact joint marginal of noisy observations under this model's
    /// hyperparameters and the *prior* weight covariance: the per-output
    /// factor of the training objective. The Matern component is
    /// block-diagonal over regions; the feature component couples globally.
    pub fn log_marginal(
        &self,
        inputs: &[GpInput],
        mean: &[f64],
        nu: &[f64],
        xi: &[f64],
        assignment: &[usize],
    ) -> Result<f64> {
        let n = inputs.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut cov = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut v = 0.0;
                if self.feature.dim() > 0 {
                    let fi = inputs[i].features(self.feature);
                    let fj = inputs[j].features(self.feature);
                    v += dot(&fi, &self.weight_prior.matvec(&fj));
                }
                if assignment[i] == assignment[j] {
                    let hyper = &self.regions[assignment[i]].hyper;
                    let d = great_circle_km(
                        inputs[i].lon,
                        inputs[i].lat,
                        inputs[j].lon,
                        inputs[j].lat,
                    );
                    v += hyper.sigma_f2 * matern32(d, hyper.lengthscale_km);
                    if i == j {
                        v += hyper.sigma_n2;
                    }
                }
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] += xi[i];
        }
        mvn_log_pdf(nu, mean, &cov)
    }

    /// Rebuild per-region caches (needed after deserialization).
    pub fn refresh(&mut self) -> Result<()> {
        for region in &mut self.regions {
            if region.chol.is_none() && !region.inputs.is_empty() {
                region.finalize()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn pt(lon: f64, lat: f64) -> GpInput {
        GpInput {
            lon,
            lat,
            mb: 4.0,
            dist_km: 500.0,
        }
    }

    #[test]
    fn covariance_same_instance_at_zero_distance() {
        let hyper = GpHyper {
            sigma_f2: 2.0,
            lengthscale_km: 100.0,
            sigma_n2: 0.5,
        };
        let a = pt(10.0, 20.0);
        let b0 = Mat::zeros(0, 0);
        let same = covariance(&a, &a, true, &hyper, FeatureKind::None, &b0);
        assert!((same - 2.5).abs() < 1e-12);
        let diff = covariance(&a, &a, false, &hyper, FeatureKind::None, &b0);
        assert!((diff - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matern_closed_form_at_lengthscale() {
        // d = l: (1+sqrt(3)) e^(-sqrt(3))
        let v = matern32(250.0, 250.0);
        let expect = (1.0 + 3.0f64.sqrt()) * (-(3.0f64.sqrt())).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.48335).abs() < 1e-4);
    }

    #[test]
    fn feature_only_covariance_dot_product() {
        let hyper = GpHyper {
            sigma_f2: 0.0,
            lengthscale_km: 100.0,
            sigma_n2: 0.0,
        };
        let mut a = pt(0.0, 0.0);
        let mut b = pt(90.0, 0.0);
        a.mb = 2.0;
        b.mb = 3.0;
        let b_mat = Mat::identity(2);
        let k = covariance(&a, &b, false, &hyper, FeatureKind::Onset, &b_mat);
        // (1, 2) . (1, 3) = 7
        assert!((k - 7.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<(f64, f64)> = (0..7).map(|i| (i as f64 * 10.0, 5.0)).collect();
        let (assign, centroids) = partition_regions(&pts, 1, &mut rng).unwrap();
        assert!(assign.iter().all(|&a| a == 0));
        assert_eq!(centroids.len(), 1);

        let (assign_n, _) = partition_regions(&pts, 7, &mut rng).unwrap();
        let mut seen: Vec<usize> = assign_n.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7, "k = n gives each point its own region");

        assert!(partition_regions(&pts, 8, &mut rng).is_err());
        assert!(partition_regions(&pts, 0, &mut rng).is_err());
    }

    #[test]
    fn kmeans_separates_distant_clusters() {
        // two tight clusters 20 degrees apart, intra spread ~2 degrees
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push((0.0 + 0.2 * i as f64, 0.0 + 0.1 * i as f64));
            pts.push((20.0 + 0.2 * i as f64, 0.0 + 0.1 * i as f64));
        }
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (assign, _) = partition_regions(&pts, 2, &mut rng).unwrap();
            // members of each true cluster share a label
            for i in 0..10 {
                assert_eq!(assign[2 * i], assign[0], "seed {seed}");
                assert_eq!(assign[2 * i + 1], assign[1], "seed {seed}");
            }
            assert_ne!(assign[0], assign[1], "seed {seed}");
        }
    }

    fn gp_sample(
        inputs: &[GpInput],
        hyper: &GpHyper,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let n = inputs.len();
        let mut k = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let d = great_circle_km(
                    inputs[i].lon,
                    inputs[i].lat,
                    inputs[j].lon,
                    inputs[j].lat,
                );
                let v = hyper.sigma_f2 * matern32(d, hyper.lengthscale_km);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += hyper.sigma_n2;
        }
        let (chol, _) = Cholesky::with_jitter(&k, 1e-6).unwrap();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n)
            .map(|i| (0..=i).map(|j| chol.l[(i, j)] * z[j]).sum())
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 12;
            let inputs: Vec<GpInput> = (0..n)
                .map(|_| {
                    pt(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    )
                })
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let xi: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.1)).collect();
            let data = RegionData {
                inputs: &inputs,
                y: &y,
                xi: &xi,
            };
            let hyper = GpHyper {
                sigma_f2: rng.random_range(0.2..3.0),
                lengthscale_km: rng.random_range(50.0..800.0),
                sigma_n2: rng.random_range(0.05..0.5),
            };
            let (_, grad) = log_marginal_and_grad(&data, &hyper).unwrap();
            let h = 1e-5;
            let mut log_p = [
                hyper.sigma_f2.ln(),
                hyper.lengthscale_km.ln(),
                hyper.sigma_n2.ln(),
            ];
            for d in 0..3 {
                let orig = log_p[d];
                log_p[d] = orig + h;
                let (up, _) = log_marginal_and_grad(&data, &hyper_from_log(&log_p)).unwrap();
                log_p[d] = orig - h;
                let (dn, _) = log_marginal_and_grad(&data, &hyper_from_log(&log_p)).unwrap();
                log_p[d] = orig;
                let fd = (up - dn) / (2.0 * h);
                let denom = fd.abs().max(grad[d].abs()).max(1e-8);
                assert!(
                    ((grad[d] - fd) / denom).abs() < 1e-4,
                    "trial {trial} dim {d}: analytic {} vs fd {fd}",
                    grad[d]
                );
            }
        }
    }

    #[test]
    fn hyperparameter_recovery_on_synthetic_data() {
        let truth = GpHyper {
            sigma_f2: 1.0,
            lengthscale_km: 100.0,
            sigma_n2: 0.1,
        };
        let config = GpFitConfig::default();
        let mut ok = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<GpInput> = (0..50)
                .map(|_| {
                    pt(
                        rng.random_range(-2.5..2.5),
                        rng.random_range(-2.5..2.5),
                    )
                })
                .collect();
            let y = gp_sample(&inputs, &truth, &mut rng);
            let xi = vec![0.0; 50];
            let data = RegionData {
                inputs: &inputs,
                y: &y,
                xi: &xi,
            };
            let (fit, report) = fit_hyperparameters(&data, &GpHyper::default(), &config, &mut rng);
            assert!(report.objective >= report.init_objective - 1e-9);
            if fit.lengthscale_km > 50.0 && fit.lengthscale_km < 200.0 {
                ok += 1;
            }
        }
        assert!(ok >= 8, "lengthscale recovered in only {ok}/10 seeds");
    }

    #[test]
    fn identical_targets_push_signal_variance_to_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<GpInput> = (0..12)
            .map(|i| pt(0.3 * i as f64, 0.2 * i as f64))
            .collect();
        let y = vec![0.0; 12];
        let xi = vec![0.0; 12];
        let data = RegionData {
            inputs: &inputs,
            y: &y,
            xi: &xi,
        };
        let config = GpFitConfig::default();
        let (fit, _) = fit_hyperparameters(&data, &GpHyper::default(), &config, &mut rng);
        assert!(
            fit.sigma_f2 < 1e-4,
            "sigma_f2 {} should approach its lower bound",
            fit.sigma_f2
        );
    }

    #[test]
    fn predict_with_no_training_points() {
        let hyper = GpHyper {
            sigma_f2: 0.7,
            lengthscale_km: 120.0,
            sigma_n2: 0.2,
        };
        let model = OutputModel::prior_default(FeatureKind::None, hyper, &GpFitConfig::default());
        let (mean, var) = model.predict(&pt(5.0, 5.0), 123.0);
        assert!((mean - 123.0).abs() < 1e-12);
        assert!((var - 0.9).abs() < 1e-12);
    }

    fn fit_simple(
        inputs: &[GpInput],
        nu: &[f64],
        xi: &[f64],
    ) -> OutputModel {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = inputs.len();
        let mean = vec![0.0; n];
        let assignment = vec![0usize; n];
        let centroids = vec![(inputs[0].lon, inputs[0].lat)];
        OutputModel::fit(
            FeatureKind::None,
            inputs,
            &mean,
            nu,
            xi,
            &assignment,
            &centroids,
            &GpFitConfig::default(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn interpolation_limit_recovers_observation() {
        let inputs = vec![pt(10.0, 10.0), pt(12.0, 10.0)];
        let nu = vec![1.5, -0.5];
        let xi = vec![1e-9, 1e-9];
        let mut model = fit_simple(&inputs, &nu, &xi);
        // force tiny noise so the posterior interpolates
        for region in &mut model.regions {
            region.hyper.sigma_n2 = 1e-9;
            region.hyper.sigma_f2 = 1.0;
            region.hyper.lengthscale_km = 200.0;
            region.finalize().unwrap();
        }
        let (mean, var) = model.predict(&inputs[0], 0.0);
        assert!((mean - 1.5).abs() < 1e-3, "mean {mean}");
        assert!(var < 1e-6);
    }

    #[test]
    fn reverts_to_mean_function_far_away() {
        let inputs = vec![pt(0.0, 0.0), pt(1.0, 0.0)];
        let nu = vec![2.0, 2.2];
        let xi = vec![1e-6, 1e-6];
        let model = fit_simple(&inputs, &nu, &xi);
        let sigma_f = model.regions[0].hyper.sigma_f2.sqrt();
        let far = pt(179.0, 0.0);
        let (mean, _) = model.predict(&far, 10.0);
        assert!(
            (mean - 10.0).abs() < 1e-3 * sigma_f.max(1e-3),
            "mean {mean} should revert to the mean function"
        );
    }

    #[test]
    fn posterior_variance_never_exceeds_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<GpInput> = (0..15)
            .map(|_| pt(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let nu: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let xi = vec![0.05; 15];
        let model = fit_simple(&inputs, &nu, &xi);
        let hyper = model.regions[0].hyper;
        let prior_var = hyper.sigma_f2 + hyper.sigma_n2;
        for _ in 0..50 {
            let x = pt(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let (_, var) = model.predict(&x, 0.0);
            assert!(var <= prior_var + 1e-9);
            assert!(var >= hyper.sigma_n2 - 1e-12);
        }
    }

    #[test]
    fn prediction_invariant_to_training_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<GpInput> = (0..10)
            .map(|_| pt(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let nu: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let xi = vec![0.1; 10];
        let model = fit_simple(&inputs, &nu, &xi);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.reverse();
        let inputs_p: Vec<GpInput> = perm.iter().map(|&i| inputs[i]).collect();
        let nu_p: Vec<f64> = perm.iter().map(|&i| nu[i]).collect();
        let xi_p: Vec<f64> = perm.iter().map(|&i| xi[i]).collect();
        let mut model_p = fit_simple(&inputs_p, &nu_p, &xi_p);
        // same hyperparameters to isolate the conditioning math
        for (r, rp) in model.regions.iter().zip(model_p.regions.iter_mut()) {
            rp.hyper = r.hyper;
            rp.finalize().unwrap();
        }
        let x = pt(0.5, 0.5);
        let (m1, v1) = model.predict(&x, 0.0);
        let (m2, v2) = model_p.predict(&x, 0.0);
        assert!((m1 - m2).abs() < 1e-9);
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn log_marginal_one_dimensional_cases() {
        // K = 0, xi = 1, nu = mean: each factor is log N(0; 0, 1)
        let hyper = GpHyper {
            sigma_f2: 1e-300,
            lengthscale_km: 100.0,
            sigma_n2: 1e-300,
        };
        let model = OutputModel::prior_default(FeatureKind::None, hyper, &GpFitConfig::default());
        let inputs = vec![pt(0.0, 0.0)];
        let got = model
            .log_marginal(&inputs, &[3.0], &[3.0], &[1.0], &[0])
            .unwrap();
        assert!((got - crate::numeric::normal_log_pdf(0.0, 0.0, 1.0)).abs() < 1e-9);

        // single point, general case: log N(nu; mu, sigma_f2+sigma_n2+xi)
        let hyper2 = GpHyper {
            sigma_f2: 0.5,
            lengthscale_km: 100.0,
            sigma_n2: 0.2,
        };
        let model2 =
            OutputModel::prior_default(FeatureKind::None, hyper2, &GpFitConfig::default());
        let got2 = model2
            .log_marginal(&inputs, &[1.0], &[2.5], &[0.3], &[0])
            .unwrap();
        assert!((got2 - crate::numeric::normal_log_pdf(2.5, 1.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn log_marginal_rewards_correlation_for_colocated_events() {
        // two co-located events, sigma_n -> 0: equal messages are far more
        // likely than opposite ones
        let hyper = GpHyper {
            sigma_f2: 1.0,
            lengthscale_km: 100.0,
            sigma_n2: 1e-6,
        };
        let model = OutputModel::prior_default(FeatureKind::None, hyper, &GpFitConfig::default());
        let inputs = vec![pt(10.0, 10.0), pt(10.0, 10.0)];
        let xi = vec![0.1, 0.1];
        let mean = vec![0.0, 0.0];
        let equal = model
            .log_marginal(&inputs, &mean, &[1.0, 1.0], &xi, &[0, 0])
            .unwrap();
        let opposite = model
            .log_marginal(&inputs, &mean, &[1.0, -1.0], &xi, &[0, 0])
            .unwrap();
        assert!(equal > opposite + 1.0, "equal {equal} vs opposite {opposite}");
        // hand check against the 2x2 Gaussian
        let cov = Mat::from_rows(&[vec![1.1 + 1e-6, 1.0], vec![1.0, 1.1 + 1e-6]]);
        let hand = mvn_log_pdf(&[1.0, 1.0], &mean, &cov).unwrap();
        assert!((equal - hand).abs() < 1e-6);
    }
}

#include "conjlab/rds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace conjlab {

namespace {

std::uint64_t splitmix(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double hash_uniform(std::uint64_t seed, std::uint64_t path, std::uint64_t index)
{
    std::uint64_t h = splitmix(seed);
    h = splitmix(h ^ (path * 0xd1b54a32d192ed03ULL));
    h = splitmix(h ^ index);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

constexpr std::uint64_t kPhaseIndex = 0xfffffffffffffff1ULL;

/// Fixed generic orthonormal frame.
Mat generic_frame(int d, std::uint64_t salt)
{
    Sampler sampler(0x3c6ef372fe94f82bULL ^ salt);
    Mat m(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = sampler.normal();
    Eigen::HouseholderQR<Mat> qr(m);
    return qr.householderQ() * Mat::Identity(d, d);
}

/// Q of the QR factorization with a positive diagonal; logs of |R_jj| added to `logs`.
Mat qr_step(const Mat& m, Vec* logs)
{
    const int d = static_cast<int>(m.cols());
    Eigen::HouseholderQR<Mat> qr(m);
    Mat q = qr.householderQ() * Mat::Identity(m.rows(), d);
    const Mat& r = qr.matrixQR();
    for (int j = 0; j < d; ++j) {
        const double rjj = r(j, j);
        if (rjj == 0.0 || !std::isfinite(rjj)) throw NumericalFailure("QR step produced a zero or non-finite pivot");
        if (rjj < 0.0) q.col(j) = -q.col(j);
        if (logs) (*logs)(j) += std::log(std::abs(rjj));
    }
    return q;
}

Mat checked_inverse(const Mat& a, Time position)
{
    Eigen::PartialPivLU<Mat> lu(a);
    const double rcond = lu.rcond();
    if (!(rcond > 1e-14)) throw SingularStep(position, rcond);
    return lu.inverse();
}

double spectral_norm(const Mat& m)
{
    return Eigen::JacobiSVD<Mat>(m).singularValues()(0);
}

/// Generalized singular values of M between the Gram matrices Q_from and Q_to:
/// {min, max} of sqrt(cᵀMᵀQ_to M c / cᵀQ_from c).
std::pair<double, double> gram_stretch(const Mat& m, const Mat& q_from, const Mat& q_to)
{
    Eigen::LLT<Mat> from(q_from);
    Eigen::LLT<Mat> to(q_to);
    if (from.info() != Eigen::Success || to.info() != Eigen::Success) {
        throw NumericalFailure("restricted Gram matrix is not positive definite");
    }
    const Mat lt_from = from.matrixU();
    const Mat lt_to = to.matrixU();
    const Mat core = lt_to * m * lt_from.triangularView<Eigen::Upper>().solve(Mat::Identity(m.cols(), m.cols()));
    const Vec sv = Eigen::JacobiSVD<Mat>(core).singularValues();
    return {sv(sv.size() - 1), sv(0)};
}

}  // namespace

// ---------------------------------------------------------------- ShiftMDS

ShiftMDS ShiftMDS::bernoulli(std::vector<double> probabilities, std::uint64_t seed)
{
    if (probabilities.empty()) throw InvalidArgument("Bernoulli base needs at least one symbol");
    double total = 0.0;
    for (const double p : probabilities) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("Bernoulli probabilities must be non-negative");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("Bernoulli probabilities must sum to 1");
    ShiftMDS mds;
    mds.kind_ = MdsKind::bernoulli;
    mds.seed_ = seed;
    mds.probabilities_ = std::move(probabilities);
    mds.cumulative_.resize(mds.probabilities_.size());
    std::partial_sum(mds.probabilities_.begin(), mds.probabilities_.end(), mds.cumulative_.begin());
    mds.cumulative_.back() = 1.0;
    return mds;
}

ShiftMDS ShiftMDS::rotation(double angle, std::uint64_t seed)
{
    if (!std::isfinite(angle)) throw InvalidArgument("rotation angle must be finite");
    const double turns = angle / (2.0 * std::numbers::pi);
    if (std::abs(turns - std::round(turns * 1e6) / 1e6) < 1e-12) {
        throw InvalidArgument("rotation angle must not be a rational multiple of 2π with small denominator");
    }
    ShiftMDS mds;
    mds.kind_ = MdsKind::rotation;
    mds.seed_ = seed;
    mds.angle_ = angle;
    return mds;
}

double ShiftMDS::uniform(const Omega& w) const
{
    return hash_uniform(seed_, w.path, static_cast<std::uint64_t>(w.shift));
}

std::size_t ShiftMDS::symbol(const Omega& w) const
{
    if (kind_ != MdsKind::bernoulli) throw InvalidArgument("symbols exist only on Bernoulli bases");
    const double u = uniform(w);
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
}

double ShiftMDS::phase(const Omega& w) const
{
    if (kind_ != MdsKind::rotation) throw InvalidArgument("phases exist only on rotation bases");
    const double start = hash_uniform(seed_, w.path, kPhaseIndex);
    const double x = start + static_cast<double>(w.shift) * (angle_ / (2.0 * std::numbers::pi));
    return x - std::floor(x);
}

std::vector<double> ShiftMDS::window(std::uint64_t path, Time from, std::size_t length) const
{
    std::vector<double> out(length);
    for (std::size_t i = 0; i < length; ++i) {
        const Omega w{path, from + static_cast<Time>(i)};
        out[i] = kind_ == MdsKind::bernoulli ? static_cast<double>(symbol(w)) : phase(w);
    }
    return out;
}

// ---------------------------------------------------------------- Cocycle

Mat Cocycle::A(const Omega& w) const
{
    if (!mds || !generator) throw InvalidArgument("cocycle needs a base and a generator");
    Mat a = generator(*mds, w);
    if (a.rows() != dim || a.cols() != dim) throw InvalidArgument("cocycle generator has the wrong shape");
    if (!a.allFinite()) throw NumericalFailure("cocycle generator returned non-finite entries");
    return a;
}

Mat cocycle_products(const Cocycle& c, Time n, const Omega& w)
{
    Mat p = Mat::Identity(c.dim, c.dim);
    if (n >= 0) {
        for (Time k = 0; k < n; ++k) p = c.A(w.shifted(k)) * p;
    } else {
        for (Time k = -1; k >= n; --k) p = checked_inverse(c.A(w.shifted(k)), w.shift + k) * p;
    }
    return p;
}

IntegrabilityReport check_integrability(const Cocycle& c, std::size_t paths, std::size_t length)
{
    IntegrabilityReport report;
    double sum_a = 0.0, sum_inv = 0.0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < paths; ++p) {
        for (std::size_t k = 0; k < length; ++k) {
            const Omega w{static_cast<std::uint64_t>(p), static_cast<Time>(k)};
            const Vec sv = Eigen::JacobiSVD<Mat>(c.A(w)).singularValues();
            sum_a += std::max(0.0, std::log(sv(0)));
            sum_inv += std::max(0.0, -std::log(sv(sv.size() - 1)));
            ++count;
        }
    }
    if (count > 0) {
        report.mean_log_plus_A = sum_a / static_cast<double>(count);
        report.mean_log_plus_A_inv = sum_inv / static_cast<double>(count);
    }
    report.finite = std::isfinite(report.mean_log_plus_A) && std::isfinite(report.mean_log_plus_A_inv);
    return report;
}

// ---------------------------------------------------------------- spectrum

bool SpectrumReport::all_negative() const
{
    return !lambdas.empty() && lambdas.front() + gap_parameter < 0.0;
}

int SpectrumReport::dim() const
{
    return std::accumulate(multiplicities.begin(), multiplicities.end(), 0);
}

int SpectrumReport::cumulative(std::size_t i) const
{
    if (i > multiplicities.size()) throw InvalidArgument("spectrum component out of range");
    return std::accumulate(multiplicities.begin(), multiplicities.begin() + static_cast<std::ptrdiff_t>(i), 0);
}

SpectrumReport lyapunov_spectrum(const Cocycle& c, const SpectrumOptions& options)
{
    if (options.n_steps < 2) throw InvalidArgument("spectrum needs at least two steps");
    if (options.n_samples < 1) throw InvalidArgument("spectrum needs at least one sample");
    const int d = c.dim;
    SpectrumReport report;
    report.n_steps = options.n_steps;
    report.n_samples = options.n_samples;
    report.integrability = check_integrability(c, std::min<std::size_t>(options.n_samples, 16), 256);
    if (!report.integrability.finite) throw NumericalFailure("log-integrability check of the generator failed");

    const std::size_t half = options.n_steps / 2;
    std::vector<Vec> first(options.n_samples), second(options.n_samples), total(options.n_samples);
    for (std::size_t i = 0; i < options.n_samples; ++i) {
        const Omega w{static_cast<std::uint64_t>(i), 0};
        Mat q = Mat::Identity(d, d);
        Vec s1 = Vec::Zero(d), s2 = Vec::Zero(d);
        for (std::size_t k = 0; k < options.n_steps; ++k) {
            q = qr_step(c.A(w.shifted(static_cast<Time>(k))) * q, k < half ? &s1 : &s2);
            if (i == 0 && (k + 1) % report.trace_every == 0) {
                const Vec running = (s1 + s2) / static_cast<double>(k + 1);
                report.trace.emplace_back(running.data(), running.data() + d);
            }
        }
        first[i] = s1 / static_cast<double>(half);
        second[i] = s2 / static_cast<double>(options.n_steps - half);
        total[i] = (s1 + s2) / static_cast<double>(options.n_steps);
        std::sort(first[i].data(), first[i].data() + d, std::greater<>());
        std::sort(second[i].data(), second[i].data() + d, std::greater<>());
        std::sort(total[i].data(), total[i].data() + d, std::greater<>());
    }

    const double n = static_cast<double>(options.n_samples);
    Vec mean = Vec::Zero(d), m1 = Vec::Zero(d), m2 = Vec::Zero(d);
    for (std::size_t i = 0; i < options.n_samples; ++i) {
        mean += total[i];
        m1 += first[i];
        m2 += second[i];
    }
    mean /= n;
    m1 /= n;
    m2 /= n;
    Vec hw(d);
    for (int j = 0; j < d; ++j) {
        double var = 0.0;
        for (std::size_t i = 0; i < options.n_samples; ++i) var += std::pow(total[i](j) - mean(j), 2);
        const double se = options.n_samples > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
        hw(j) = std::max(1.96 * se, 1e-9);
    }
    report.raw_exponents.assign(mean.data(), mean.data() + d);
    report.raw_half_widths.assign(hw.data(), hw.data() + d);

    for (int j = 0; j < d; ++j) {
        const double drift = std::abs(m1(j) - m2(j));
        report.drift = std::max(report.drift, drift);
        const double allowed = 5.0 * hw(j) + options.transient_allowance / static_cast<double>(half);
        if (drift > allowed) {
            throw NotConverged("Lyapunov exponent " + std::to_string(j + 1) +
                                   " drifts between halves; increase n_steps",
                               options.n_steps, drift, allowed);
        }
    }

    // Consecutive exponents closer than 3× their half-width form one cluster.
    std::size_t start = 0;
    for (int j = 1; j <= d; ++j) {
        const bool split = j == d || mean(j - 1) - mean(j) > 3.0 * std::max(hw(j - 1), hw(j));
        if (!split) continue;
        double lam = 0.0, width = 0.0;
        for (int k = static_cast<int>(start); k < j; ++k) {
            lam += mean(k);
            width = std::max(width, hw(k));
        }
        report.lambdas.push_back(lam / static_cast<double>(j - static_cast<int>(start)));
        report.half_widths.push_back(width);
        report.multiplicities.push_back(j - static_cast<int>(start));
        start = static_cast<std::size_t>(j);
    }

    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < report.lambdas.size(); ++i) {
        gap = std::min(gap, report.lambdas[i - 1] - report.lambdas[i]);
    }
    report.gap_parameter = std::min(gap, std::abs(report.lambdas.front())) / 2.0;

    if (options.require_negative && !report.all_negative()) {
        throw CertificateError("spectrum is not negative: lambda_1 + a = " +
                               std::to_string(report.lambdas.front() + report.gap_parameter));
    }

    const OseledetsFrame frame(c, report, Omega{0, 0}, 0, 0, options.splitting_steps);
    for (std::size_t i = 0; i < report.lambdas.size(); ++i) {
        report.filtration.push_back(frame.filtration(i, 0));
        report.splitting.push_back(frame.block(i, 0));
    }
    return report;
}

// ---------------------------------------------------------------- Oseledets frame

OseledetsFrame::OseledetsFrame(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w, Time lo, Time hi,
                               std::size_t sweep_steps)
    : cocycle_(c), w_(w), lo_(lo), hi_(hi)
{
    if (hi < lo) throw InvalidArgument("Oseledets frame needs lo <= hi");
    if (spectrum.dim() != c.dim) throw InvalidArgument("spectrum dimension does not match the cocycle");
    const int d = c.dim;
    const std::size_t k = spectrum.lambdas.size();
    for (std::size_t i = 0; i <= k; ++i) offsets_.push_back(spectrum.cumulative(i));
    const std::size_t count = static_cast<std::size_t>(hi - lo + 1);
    const Time burn = static_cast<Time>(sweep_steps);

    // Forward sweep: W(p)[:, :D] spans the D fastest directions at θᵖω.
    std::vector<Mat> fast(count);
    Mat q = generic_frame(d, 1);
    for (Time p = lo - burn; p <= hi; ++p) {
        if (p >= lo) fast[static_cast<std::size_t>(p - lo)] = q;
        if (p < hi) q = qr_step(c.A(w.shifted(p)) * q, nullptr);
    }
    // Backward sweep with transposes: F(p)[:, D:] spans the slow space V_{i+1}.
    slow_.resize(count);
    q = generic_frame(d, 2);
    for (Time p = hi + burn; p >= lo; --p) {
        if (p <= hi) slow_[static_cast<std::size_t>(p - lo)] = q;
        if (p > lo) q = qr_step(c.A(w.shifted(p - 1)).transpose() * q, nullptr);
    }

    bases_.resize(count);
    for (std::size_t idx = 0; idx < count; ++idx) {
        Mat basis(d, d);
        for (std::size_t i = 0; i < k; ++i) {
            const int d_fast = offsets_[i + 1];
            const int d_slow = offsets_[i];
            const int di = d_fast - d_slow;
            const Mat wf = fast[idx].leftCols(d_fast);
            Mat block;
            if (d_slow == 0) {
                block = wf;
            } else {
                const Mat constraint = slow_[idx].leftCols(d_slow).transpose() * wf;
                Eigen::JacobiSVD<Mat> svd(constraint, Eigen::ComputeFullV);
                block = wf * svd.matrixV().rightCols(di);
            }
            basis.middleCols(d_slow, di) = block;
        }
        bases_[idx] = std::move(basis);
    }

    steps_.assign(k, std::vector<Mat>(count > 0 ? count - 1 : 0));
    for (Time p = lo; p < hi; ++p) {
        const std::size_t idx = index(p);
        const Mat a = c.A(w.shifted(p));
        const double scale = spectral_norm(a);
        for (std::size_t i = 0; i < k; ++i) {
            const Mat from = block(i, p);
            const Mat to = block(i, p + 1);
            const Mat image = a * from;
            const Mat step = to.transpose() * image;
            defect_ = std::max(defect_, (image - to * step).norm() / scale);
            steps_[i][idx] = step;
        }
    }
}

std::size_t OseledetsFrame::index(Time p) const
{
    if (p < lo_ || p > hi_) throw InvalidArgument("position " + std::to_string(p) + " outside the Oseledets frame");
    return static_cast<std::size_t>(p - lo_);
}

const Mat& OseledetsFrame::basis(Time p) const
{
    return bases_[index(p)];
}

Mat OseledetsFrame::block(std::size_t i, Time p) const
{
    if (i + 1 >= offsets_.size()) throw InvalidArgument("spectrum component out of range");
    return basis(p).middleCols(offsets_[i], offsets_[i + 1] - offsets_[i]);
}

Mat OseledetsFrame::filtration(std::size_t i, Time p) const
{
    if (i + 1 >= offsets_.size()) throw InvalidArgument("spectrum component out of range");
    const Mat& f = slow_[index(p)];
    return f.rightCols(f.cols() - offsets_[i]);
}

Mat OseledetsFrame::restricted_step(std::size_t i, Time p) const
{
    if (i >= steps_.size()) throw InvalidArgument("spectrum component out of range");
    if (p < lo_ || p >= hi_) throw InvalidArgument("restricted step outside the Oseledets frame");
    return steps_[i][index(p)];
}

// ---------------------------------------------------------------- adapted norm

namespace {

struct SeriesResult {
    Mat gram;
    double tail = 0.0;
};

/// Σ_s w_s G̃_sᵀG̃_s over one direction, with G̃_s the restricted cocycle scaled
/// by e^{−λs}; the tail is estimated from the decay between the last two
/// quarter blocks.
void accumulate_direction(Mat& gram, double& tail, const std::vector<Mat>& factors, double decay_rate)
{
    const Time horizon = static_cast<Time>(factors.size());
    const int di = static_cast<int>(gram.rows());
    Mat g = Mat::Identity(di, di);
    double block_prev = 0.0, block_last = 0.0;
    const Time q2 = horizon / 2, q3 = (3 * horizon) / 4;
    for (Time s = 1; s <= horizon; ++s) {
        g = factors[static_cast<std::size_t>(s - 1)] * g;
        const Mat term = std::exp(-2.0 * decay_rate * static_cast<double>(s)) * (g.transpose() * g);
        gram += term;
        const double size = term.trace();
        if (s > q2 && s <= q3) block_prev += size;
        if (s > q3) block_last += size;
    }
    if (block_last == 0.0) return;
    const double ratio = block_prev > 0.0 ? block_last / block_prev : std::numeric_limits<double>::infinity();
    tail += ratio < 1.0 ? block_last * ratio / (1.0 - ratio) : std::numeric_limits<double>::infinity();
}

}  // namespace

RandomNorm::RandomNorm(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w, Time t_lo, Time t_hi,
                       const RandomNormOptions& options)
    : w_(w), t_lo_(t_lo), t_hi_(t_hi)
{
    if (t_hi < t_lo) throw InvalidArgument("random norm window needs t_lo <= t_hi");
    if (options.initial_horizon < 4) throw InvalidArgument("random norm horizon must be at least 4");
    const std::size_t k = spectrum.lambdas.size();
    const double a = spectrum.gap_parameter;
    if (!(a > 0.0)) throw InvalidArgument("random norm needs a positive gap parameter");
    if (!options.two_sided && !spectrum.all_negative()) {
        throw InvalidArgument("one-sided random norm needs lambda_1 + a < 0");
    }
    const std::size_t count = static_cast<std::size_t>(t_hi - t_lo + 1);

    for (Time horizon = options.initial_horizon;; horizon *= 2) {
        if (horizon > options.horizon_cap) {
            throw NotConverged("random norm series tail above tolerance at the horizon cap",
                               static_cast<std::size_t>(options.horizon_cap), tail_, options.tail_tolerance);
        }
        const Time back = options.two_sided ? horizon : 0;
        frame_ = std::make_shared<OseledetsFrame>(c, spectrum, w, t_lo - back, t_hi + horizon, options.sweep_steps);
        gram_.assign(k, std::vector<Mat>(count));
        tail_ = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            const double lam = spectrum.lambdas[i];
            const int di = spectrum.multiplicities[i];
            for (Time t = t_lo; t <= t_hi; ++t) {
                Mat gram = Mat::Identity(di, di);
                double tail = 0.0;
                std::vector<Mat> factors;
                factors.reserve(static_cast<std::size_t>(horizon));
                for (Time s = 0; s < horizon; ++s) {
                    factors.push_back(std::exp(-lam) * frame_->restricted_step(i, t + s));
                }
                // One-sided: e^{−2(λ+a)s}‖Φ(s)u‖²; two-sided adds e^{−2λs+2as} for s < 0.
                accumulate_direction(gram, tail, factors, a);
                if (options.two_sided) {
                    factors.clear();
                    for (Time s = 1; s <= horizon; ++s) {
                        factors.push_back(std::exp(lam) * checked_inverse(frame_->restricted_step(i, t - s),
                                                                          w.shift + t - s));
                    }
                    accumulate_direction(gram, tail, factors, a);
                }
                const double floor = Eigen::SelfAdjointEigenSolver<Mat>(gram).eigenvalues()(0);
                tail_ = std::max(tail_, tail / floor);
                gram_[i][static_cast<std::size_t>(t - t_lo)] = std::move(gram);
            }
        }
        horizon_ = horizon;
        if (tail_ <= options.tail_tolerance) break;
    }

    weights_.resize(count);
    const int d = c.dim;
    for (Time t = t_lo; t <= t_hi; ++t) {
        Mat blocks = Mat::Zero(d, d);
        for (std::size_t i = 0; i < k; ++i) {
            const int off = spectrum.cumulative(i);
            const int di = spectrum.multiplicities[i];
            blocks.block(off, off, di, di) = gram_[i][static_cast<std::size_t>(t - t_lo)];
        }
        const Mat s_inv = checked_inverse(frame_->basis(t), w.shift + t);
        Mat weight = s_inv.transpose() * blocks * s_inv;
        weights_[static_cast<std::size_t>(t - t_lo)] = 0.5 * (weight + weight.transpose());
    }
}

std::size_t RandomNorm::index(Time t) const
{
    if (t < t_lo_ || t > t_hi_) {
        throw InvalidArgument("time " + std::to_string(t) + " outside the random norm window [" +
                              std::to_string(t_lo_) + ", " + std::to_string(t_hi_) + "]");
    }
    return static_cast<std::size_t>(t - t_lo_);
}

Mat RandomNorm::weight(Time t) const
{
    return weights_[index(t)];
}

const Mat& RandomNorm::gram(std::size_t i, Time t) const
{
    if (i >= gram_.size()) throw InvalidArgument("spectrum component out of range");
    return gram_[i][index(t)];
}

double RandomNorm::norm(const Vec& x, Time t) const
{
    return std::sqrt(std::max(0.0, x.dot(weights_[index(t)] * x)));
}

double RandomNorm::component_norm(std::size_t i, const Vec& c, Time t) const
{
    return std::sqrt(std::max(0.0, c.dot(gram(i, t) * c)));
}

double RandomNorm::equivalence(Time t) const
{
    const Vec mu = Eigen::SelfAdjointEigenSolver<Mat>(weights_[index(t)]).eigenvalues();
    return std::max(std::sqrt(mu(mu.size() - 1)), 1.0 / std::sqrt(mu(0)));
}

NormFamily RandomNorm::family() const
{
    auto weights = std::make_shared<const std::vector<Mat>>(weights_);
    const Omega base = w_;
    const Time lo = t_lo_, hi = t_hi_;
    const int d = weights_.empty() ? 0 : static_cast<int>(weights_.front().rows());
    return NormFamily::from_weights(d, [weights, base, lo, hi](Time t, const Omega& other) -> Mat {
        if (other.path != base.path) throw InvalidArgument("random norm evaluated on a different path");
        const Time offset = other.shift - base.shift + t;
        if (offset < lo || offset > hi) {
            throw InvalidArgument("time " + std::to_string(offset) + " outside the random norm window");
        }
        return (*weights)[static_cast<std::size_t>(offset - lo)];
    });
}

RandomNorm adapted_random_norm(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w, Time t_lo, Time t_hi,
                               const RandomNormOptions& options)
{
    return RandomNorm(c, spectrum, w, t_lo, t_hi, options);
}

RandomEstCheck check_random_est(const RandomNorm& norm, const SpectrumReport& spectrum, Time t_max, double slack)
{
    if (t_max < 0) throw InvalidArgument("sandwich check needs t_max >= 0");
    const Time t0 = std::clamp<Time>(0, norm.t_lo(), norm.t_hi());
    if (t0 + t_max > norm.t_hi()) throw InvalidArgument("sandwich horizon exceeds the random norm window");
    const double a = spectrum.gap_parameter;
    const std::size_t k = spectrum.lambdas.size();
    RandomEstCheck check;
    check.slack = slack;
    check.worst_upper.assign(k, 0.0);
    check.worst_lower.assign(k, 0.0);
    check.worst_lower_inf.assign(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const double lam = spectrum.lambdas[i];
        const int di = spectrum.multiplicities[i];
        Mat g = Mat::Identity(di, di);  // Ψ(t) e^{−λt}
        for (Time t = 0; t <= t_max; ++t) {
            if (t > 0) g = std::exp(-lam) * norm.frame().restricted_step(i, t0 + t - 1) * g;
            const auto [lo, hi] = gram_stretch(g, norm.gram(i, t0), norm.gram(i, t0 + t));
            const double td = static_cast<double>(t);
            // sup/e^{(λ+a)t} and e^{(λ−a)t}/sup, with the e^{λt} factor removed from both.
            const double upper = hi * std::exp(-a * td);
            const double lower = std::exp(-a * td) / hi;
            const double lower_inf = std::exp(-a * td) / lo;
            check.worst_upper[i] = std::max(check.worst_upper[i], upper);
            check.worst_lower[i] = std::max(check.worst_lower[i], lower);
            check.worst_lower_inf[i] = std::max(check.worst_lower_inf[i], lower_inf);
            if (upper > 1.0 + slack) ++check.violations;
            if (lower > 1.0 + slack) ++check.violations;
        }
    }
    return check;
}

double estimate_epsilon(const RandomNorm& norm)
{
    const Time t0 = std::clamp<Time>(0, norm.t_lo(), norm.t_hi());
    const double base = std::log(norm.equivalence(t0));
    double eps = 0.0;
    for (Time t = norm.t_lo(); t <= norm.t_hi(); ++t) {
        if (t == t0) continue;
        eps = std::max(eps, std::abs(std::log(norm.equivalence(t)) - base) / static_cast<double>(std::abs(t - t0)));
    }
    return eps;
}

// ---------------------------------------------------------------- nonlinear RDS

Vec RandomSystem::psi(Time t, const Omega& w, const Vec& x) const
{
    if (t < 0) throw InvalidArgument("psi is defined for t >= 0");
    Vec y = x;
    for (Time k = 0; k < t; ++k) {
        const Omega wk = w.shifted(k);
        Vec next = linear.A(wk) * y;
        if (nonlinear) next += nonlinear(*linear.mds, wk, y);
        y = std::move(next);
    }
    return y;
}

SemilinearSystem RandomSystem::as_system(const TimeWindow& window, NormFamily norms) const
{
    SemilinearSystem sys;
    sys.dim = linear.dim;
    sys.window = window;
    sys.norms = std::move(norms);
    const Cocycle cocycle = linear;
    sys.linear.matrix = [cocycle](Time t, const Omega& w) { return cocycle.A(w.shifted(t)); };
    if (nonlinear) {
        const auto mds = linear.mds;
        const auto f = nonlinear;
        sys.nonlinear.value = [mds, f](Time t, const Omega& w, const Vec& x) { return f(*mds, w.shifted(t), x); };
        if (jacobian) {
            const auto jac = jacobian;
            sys.nonlinear.jacobian = [mds, jac](Time t, const Omega& w, const Vec& x) {
                return jac(*mds, w.shifted(t), x);
            };
        }
        sys.nonlinear.smoothness = 1;
    } else {
        sys.nonlinear = Nonlinearity::zero(linear.dim);
    }
    return sys;
}

RandomSystem rds_from_system(const SemilinearSystem& sys, std::shared_ptr<const ShiftMDS> mds,
                             const SamplingSpec& sampling, EquivalenceCheck* check, double tolerance)
{
    sys.validate();
    if (!mds) throw InvalidArgument("rds_from_system needs a base");
    const TimeWindow& win = sys.window;
    if (win.t_min() > 0 || win.t_max() < 1) throw InvalidArgument("rds_from_system needs 0 and 1 inside the window");

    RandomSystem rds;
    rds.linear.dim = sys.dim;
    rds.linear.mds = mds;
    const auto matrix = sys.linear.matrix;
    rds.linear.generator = [matrix](const ShiftMDS&, const Omega& w) { return matrix(0, w); };
    const auto value = sys.nonlinear.value;
    rds.nonlinear = [value](const ShiftMDS&, const Omega& w, const Vec& x) { return value(0, w, x); };
    if (sys.nonlinear.jacobian) {
        const auto jac = sys.nonlinear.jacobian;
        rds.jacobian = [jac](const ShiftMDS&, const Omega& w, const Vec& x) { return jac(0, w, x); };
    }

    EquivalenceCheck result;
    Sampler sampler(sampling.seed ^ 0x6a09e667f3bcc909ULL);
    const std::size_t count = std::max<std::size_t>(sampling.points, 1);
    for (std::size_t i = 0; i < count; ++i) {
        const Omega w{static_cast<std::uint64_t>(sampler.index(1024)), 0};
        const Time tau = sampler.time(0, win.t_max());
        const Time t = sampler.time(tau, win.t_max());
        const Vec x = sampler.in_ball(sys.dim, sampling.radius);
        const Vec direct = general_solution(sys, t, tau, w, x);
        const Vec shifted = general_solution(sys, t - tau, 0, w.shifted(tau), x);
        const double scale = std::max({1.0, direct.norm(), x.norm()});
        const double residual = (direct - shifted).norm() / scale;
        if (residual > result.residual || i == 0) result = {residual, t, tau, x.norm()};
    }
    if (check) *check = result;
    if (result.residual > tolerance) {
        throw InvalidArgument("system is not generated by the shift: phi(t,tau,x) differs from phi_{theta^tau}(t-tau,0,x) "
                              "by " + std::to_string(result.residual) + " at t=" + std::to_string(result.t) +
                              ", tau=" + std::to_string(result.tau) + ", |x|=" + std::to_string(result.x_norm));
    }
    return rds;
}

// ---------------------------------------------------------------- linearization

LinearizationRefused::LinearizationRefused(const std::string& what, std::vector<ConditionCheck> checks_)
    : Error(what), checks(std::move(checks_))
{
}

RdsLinearization rds_linearize(const RandomSystem& rds, const SpectrumReport& spectrum, const Omega& w,
                               const TimeWindow& window, const RdsOptions& options)
{
    const auto make = [](std::string name, double measured, double threshold, bool strict) {
        ConditionCheck c;
        c.name = std::move(name);
        c.measured = measured;
        c.threshold = threshold;
        c.margin = threshold - measured;
        c.pass = strict ? measured < threshold : measured <= threshold;
        return c;
    };

    RdsLinearization out;
    const double rate = spectrum.lambdas.front() + spectrum.gap_parameter;
    if (!(rate < 0.0)) {
        throw LinearizationRefused("linearization needs a negative spectrum (lambda_1 + a < 0)",
                                   {make("lambda_1 + a < 0", rate, 0.0, true)});
    }
    out.alpha = std::exp(rate);
    const auto& pre = options.precomputed_norm;
    if (pre && pre->omega() == w && pre->t_lo() <= window.t_min() && pre->t_hi() > window.t_max()) {
        out.norm = pre;
    } else {
        out.norm =
            std::make_shared<RandomNorm>(rds.linear, spectrum, w, window.t_min(), window.t_max() + 1, options.norm);
    }
    SemilinearSystem sys = rds.as_system(window, out.norm->family());

    GrowthCertificate growth;
    growth.K = 1.0;
    growth.alpha = out.alpha;
    growth.t_min = window.t_min();
    growth.t_max = window.t_max();
    growth.decay.assign(window.size(), 0.0);
    growth.residual = -std::numeric_limits<double>::infinity();
    for (Time s = window.t_min(); s <= window.t_max(); ++s) {
        Mat phi = Mat::Identity(sys.dim, sys.dim);
        for (Time t = s; t <= window.t_max(); ++t) {
            if (t > s) phi = step_matrix(sys, t - 1, w) * phi;
            const double n = static_cast<double>(t - s);
            const double norm = operator_norm(phi, s, t, w, sys.norms);
            const std::size_t gap = static_cast<std::size_t>(t - s);
            growth.decay[gap] = std::max(growth.decay[gap], norm);
            growth.residual = std::max(growth.residual, norm - std::pow(out.alpha, n));
            out.growth_worst_ratio = std::max(out.growth_worst_ratio, norm / std::pow(out.alpha, n));
        }
    }

    BoundsOptions bounds_options = options.bounds;
    if (options.smooth) bounds_options.order = std::max(bounds_options.order, 1);
    const NonlinearityBounds bounds = estimate_nonlinearity_bounds(sys, w, bounds_options);
    const ConditionReport conditions = check_conditions(growth, bounds, max_inverse_step_norm(sys, w));
    out.checks.push_back(make("L <= alpha", bounds.L, out.alpha, false));
    out.checks.push_back(conditions.topological);
    out.checks.push_back(conditions.invertibility);
    if (options.smooth) out.checks.push_back(conditions.smooth);
    std::string failed;
    for (const auto& c : out.checks) {
        if (!c.pass) failed += (failed.empty() ? "" : ", ") + c.name;
    }
    if (!failed.empty()) throw LinearizationRefused("linearization refused: " + failed + " fails", out.checks);

    ConjugacyOptions conj;
    conj.solver = options.solver;
    conj.bounds = bounds_options;
    out.solution = std::make_shared<ConjugacySolution>(std::move(sys), w, growth, bounds, conj);
    out.near_identity_bound = bounds.M / (1.0 - out.alpha);
    out.verification = verify_conjugacy(*out.solution, options.verify);
    if (options.smooth) out.smoothness = smoothness_report(*out.solution, 1, options.smooth_options);
    return out;
}

}  // namespace conjlab

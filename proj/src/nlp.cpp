#include "ccm/nlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#ifdef CCM_NLP_TRACE
#include <cstdio>
#endif

#include "ccm/common.hpp"

namespace ccm::opf {

namespace {

struct Eval {
    double f = 0.0;
    Eigen::VectorXd grad;
    Eigen::VectorXd ce;
    Eigen::MatrixXd je;
    Eigen::VectorXd ci;
    Eigen::MatrixXd ji;
};

void evaluate(const NlpProblem& p, const Eigen::VectorXd& x, Eval& e) {
    e.f = p.objective(x);
    e.grad = p.gradient(x);
    if (p.num_eq > 0) {
        p.equality(x, e.ce, e.je);
    } else {
        e.ce.resize(0);
        e.je.resize(0, p.num_vars);
    }
    if (p.num_ineq > 0) {
        p.inequality(x, e.ci, e.ji);
    } else {
        e.ci.resize(0);
        e.ji.resize(0, p.num_vars);
    }
}

double ineq_violation(const Eigen::VectorXd& ci) {
    double v = 0.0;
    for (int i = 0; i < ci.size(); ++i) v = std::max(v, ci(i));
    return v;
}

double constraint_theta(const Eval& e, const Eigen::VectorXd& s) {
    double theta = e.ce.lpNorm<1>();
    for (int i = 0; i < e.ci.size(); ++i) theta += std::abs(e.ci(i) + s(i));
    return theta;
}

// Largest alpha in (0, 1] with v + alpha dv >= (1 - tau) v, componentwise.
double fraction_to_boundary(const Eigen::VectorXd& v, const Eigen::VectorXd& dv,
                            double tau) {
    double alpha = 1.0;
    for (int i = 0; i < v.size(); ++i) {
        if (dv(i) < 0.0) alpha = std::min(alpha, -tau * v(i) / dv(i));
    }
    return alpha;
}

// Multiplier-weighted constraint curvature sum_i y_i Hess(cE_i) +
// sum_j z_j Hess(cI_j), obtained by central differences of J' multipliers.
// A diagonal objective model alone oscillates tangentially to curved
// constraints, so this term is required for reliable convergence.
Eigen::MatrixXd constraint_curvature(const NlpProblem& p, const Eigen::VectorXd& x,
                                     const Eigen::VectorXd& y,
                                     const Eigen::VectorXd& z) {
    const int nx = p.num_vars;
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(nx, nx);
    if (p.num_eq == 0 && p.num_ineq == 0) return h;

    Eigen::VectorXd ce;
    Eigen::MatrixXd je;
    Eigen::VectorXd ci;
    Eigen::MatrixXd ji;
    auto constraint_grad = [&](const Eigen::VectorXd& at) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(nx);
        if (p.num_eq > 0) {
            p.equality(at, ce, je);
            g += je.transpose() * y;
        }
        if (p.num_ineq > 0) {
            p.inequality(at, ci, ji);
            g += ji.transpose() * z;
        }
        return g;
    };

    for (int k = 0; k < nx; ++k) {
        const double step = 1e-7 * std::max(1.0, std::abs(x(k)));
        Eigen::VectorXd hi = x, lo = x;
        hi(k) += step;
        lo(k) -= step;
        h.col(k) = (constraint_grad(hi) - constraint_grad(lo)) / (2.0 * step);
    }
    return 0.5 * (h + h.transpose());
}

// Levenberg-Marquardt descent on 0.5 (|c_E|^2 + |max(c_I, 0)|^2); used when
// the main iteration cannot find a productive step. Returns the best point.
Eigen::VectorXd restore_feasibility(const NlpProblem& p, Eigen::VectorXd x,
                                    int max_iter) {
    Eval e;
    auto theta2 = [&](const Eval& ev) {
        double t = ev.ce.squaredNorm();
        for (int i = 0; i < ev.ci.size(); ++i) {
            t += std::pow(std::max(ev.ci(i), 0.0), 2);
        }
        return 0.5 * t;
    };

    evaluate(p, x, e);
    double best = theta2(e);
    double lambda = 1e-3;
    for (int iter = 0; iter < max_iter && best > 1e-18; ++iter) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(p.num_vars);
        Eigen::MatrixXd gn = Eigen::MatrixXd::Zero(p.num_vars, p.num_vars);
        if (e.ce.size() > 0) {
            grad += e.je.transpose() * e.ce;
            gn += e.je.transpose() * e.je;
        }
        for (int i = 0; i < e.ci.size(); ++i) {
            if (e.ci(i) > 0.0) {
                grad += e.ji.row(i).transpose() * e.ci(i);
                gn += e.ji.row(i).transpose() * e.ji.row(i);
            }
        }
        if (grad.lpNorm<Eigen::Infinity>() < 1e-12) break;

        bool accepted = false;
        for (int tries = 0; tries < 20; ++tries) {
            Eigen::MatrixXd m = gn;
            m.diagonal().array() += lambda;
            const Eigen::VectorXd d = Eigen::FullPivLU<Eigen::MatrixXd>(m).solve(-grad);
            if (!d.allFinite()) {
                lambda *= 10.0;
                continue;
            }
            Eval trial;
            evaluate(p, x + d, trial);
            const double t2 = theta2(trial);
            if (t2 < best) {
                x += d;
                e = trial;
                best = t2;
                lambda = std::max(1e-10, lambda / 3.0);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if (!accepted) break;
    }
    return x;
}

// Crossover: with the active set frozen, a few Newton steps on the
// equality-constrained KKT system remove the barrier's duality gap, landing
// exactly on the constraint boundary. Returns false (leaving the inputs
// untouched) when the polished point loses feasibility or multiplier signs.
bool polish_active_set(const NlpProblem& p, Eigen::VectorXd& x, Eigen::VectorXd& y,
                       Eigen::VectorXd& z, const Eigen::VectorXd& s,
                       const IpOptions& opts) {
    const int nx = p.num_vars;
    const int ne = p.num_eq;
    const int ni = p.num_ineq;

    std::vector<int> active;
    for (int i = 0; i < ni; ++i) {
        if (z(i) > s(i)) active.push_back(i);
    }
    const int na = static_cast<int>(active.size());
    const int nc = ne + na;

    Eigen::VectorXd xp = x;
    Eigen::VectorXd lam(nc);
    lam.head(ne) = y;
    for (int a = 0; a < na; ++a) lam(ne + a) = z(active[static_cast<size_t>(a)]);

    Eval e;
    for (int it = 0; it < 10; ++it) {
        evaluate(p, xp, e);
        Eigen::VectorXd c_all(nc);
        Eigen::MatrixXd j_all(nc, nx);
        c_all.head(ne) = e.ce;
        if (ne > 0) j_all.topRows(ne) = e.je;
        for (int a = 0; a < na; ++a) {
            c_all(ne + a) = e.ci(active[static_cast<size_t>(a)]);
            j_all.row(ne + a) = e.ji.row(active[static_cast<size_t>(a)]);
        }

        Eigen::VectorXd z_full = Eigen::VectorXd::Zero(ni);
        for (int a = 0; a < na; ++a) z_full(active[static_cast<size_t>(a)]) = lam(ne + a);
        Eigen::MatrixXd h = constraint_curvature(p, xp, lam.head(ne), z_full);
        h.diagonal() += p.hessian_diag;
        h.diagonal().array() += 1e-12;

        Eigen::VectorXd r_dual = e.grad;
        if (nc > 0) r_dual += j_all.transpose() * lam;
        if (r_dual.lpNorm<Eigen::Infinity>() < 1e-12 &&
            (nc == 0 || c_all.lpNorm<Eigen::Infinity>() < 1e-13)) {
            break;
        }

        Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nx + nc, nx + nc);
        kkt.topLeftCorner(nx, nx) = h;
        if (nc > 0) {
            kkt.topRightCorner(nx, nc) = j_all.transpose();
            kkt.bottomLeftCorner(nc, nx) = j_all;
        }
        Eigen::VectorXd rhs(nx + nc);
        rhs.head(nx) = -r_dual;
        if (nc > 0) rhs.tail(nc) = -c_all;

        const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
        if (!lu.isInvertible()) {
#ifdef CCM_NLP_TRACE
            const Eigen::VectorXd ud = lu.matrixLU().diagonal().cwiseAbs();
            std::fprintf(stderr,
                         "polish: singular kkt, na=%d it=%d upiv_min=%.3e upiv_max=%.3e rank=%ld/%ld\n",
                         na, it, ud.minCoeff(), ud.maxCoeff(),
                         static_cast<long>(lu.rank()), static_cast<long>(kkt.rows()));
#endif
            return false;
        }
        const Eigen::VectorXd step = lu.solve(rhs);
        if (!step.allFinite() || step.head(nx).lpNorm<Eigen::Infinity>() > 1.0) {
#ifdef CCM_NLP_TRACE
            std::fprintf(stderr, "polish: wild step %.3e, na=%d it=%d\n",
                         step.head(nx).lpNorm<Eigen::Infinity>(), na, it);
#endif
            return false; // the frozen set is off; stay with the barrier point
        }
        xp += step.head(nx);
        if (nc > 0) lam += step.tail(nc);
    }

    evaluate(p, xp, e);
#ifdef CCM_NLP_TRACE
    std::fprintf(stderr, "polish: na=%d eq=%.3e in=%.3e lam_min=%.3e\n", na,
                 e.ce.size() > 0 ? e.ce.lpNorm<Eigen::Infinity>() : 0.0,
                 ineq_violation(e.ci),
                 na > 0 ? lam.tail(na).minCoeff() : 0.0);
#endif
    if (e.ce.size() > 0 && e.ce.lpNorm<Eigen::Infinity>() > opts.tol_eq) return false;
    for (int i = 0; i < ni; ++i) {
        if (e.ci(i) > opts.tol_ineq) return false;
    }
    for (int a = 0; a < na; ++a) {
        if (lam(ne + a) < -1e-8) return false;
    }

    x = xp;
    y = lam.head(ne);
    z.setZero();
    for (int a = 0; a < na; ++a) z(active[static_cast<size_t>(a)]) = lam(ne + a);
    return true;
}

} // namespace

IpResult solve_nlp(const NlpProblem& p, const Eigen::VectorXd& x0,
                   const IpOptions& opts) {
    if (p.num_vars <= 0) throw Error("NLP without variables");
    if (x0.size() != p.num_vars) throw Error("NLP start point has wrong dimension");
    if (p.hessian_diag.size() != p.num_vars) throw Error("NLP Hessian diagonal has wrong dimension");

    const int nx = p.num_vars;
    const int ne = p.num_eq;
    const int ni = p.num_ineq;

    Eigen::VectorXd x = x0;
    Eval e;
    evaluate(p, x, e);

    Eigen::VectorXd s(ni), z(ni);
    double mu = opts.mu0;
    for (int i = 0; i < ni; ++i) {
        s(i) = std::max(1e-3, -e.ci(i));
        z(i) = mu / s(i);
    }
    Eigen::VectorXd y = Eigen::VectorXd::Zero(ne);

    double nu = 1.0; // l1 penalty weight in the merit function
    bool restored_once = false;

    // Track the least-violation iterate for honest infeasibility reporting.
    Eigen::VectorXd best_x = x;
    double best_theta = e.ce.lpNorm<Eigen::Infinity>() + ineq_violation(e.ci);

    IpResult res;
    res.x = x;

    auto barrier_merit = [&](const Eval& ev, const Eigen::VectorXd& sv) {
        double phi = ev.f;
        for (int i = 0; i < ni; ++i) phi -= mu * std::log(sv(i));
        phi += nu * constraint_theta(ev, sv);
        return phi;
    };

    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        // Dual residual: grad f + J_E' y + J_I' z.
        Eigen::VectorXd r_dual = e.grad;
        if (ne > 0) r_dual += e.je.transpose() * y;
        if (ni > 0) r_dual += e.ji.transpose() * z;

        const double mult_scale =
            std::max({1.0, ne > 0 ? y.lpNorm<Eigen::Infinity>() : 0.0,
                      ni > 0 ? z.lpNorm<Eigen::Infinity>() : 0.0});
        const double dual_err = r_dual.lpNorm<Eigen::Infinity>() / mult_scale;
        const double comp_err =
            ni > 0 ? (s.array() * z.array()).abs().maxCoeff() / mult_scale : 0.0;
        const double eq_err = ne > 0 ? e.ce.lpNorm<Eigen::Infinity>() : 0.0;
        const double ineq_err = ineq_violation(e.ci);

        res.kkt_error = std::max({dual_err, comp_err, eq_err, ineq_err});
#ifdef CCM_NLP_TRACE
        std::fprintf(stderr,
                     "it=%3d mu=%9.2e dual=%9.2e comp=%9.2e eq=%9.2e in=%9.2e scale=%9.2e\n",
                     iter, mu, dual_err, comp_err, eq_err, ineq_err, mult_scale);
#endif
        const double theta_now = eq_err + ineq_err;
        if (theta_now < best_theta) {
            best_theta = theta_now;
            best_x = x;
        }

        if (dual_err <= opts.tol_kkt && comp_err <= opts.tol_kkt &&
            eq_err <= opts.tol_eq && ineq_err <= opts.tol_ineq) {
            res.status = IpStatus::optimal;
            polish_active_set(p, x, y, z, s, opts);
            evaluate(p, x, e);
            break;
        }

        // Monotone barrier: shrink once the current subproblem is solved
        // loosely enough relative to mu.
        const double mu_err = std::max(
            {dual_err, eq_err, ineq_err,
             ni > 0 ? (s.array() * z.array() - mu).abs().maxCoeff() / mult_scale : 0.0});
        if (mu_err <= 10.0 * mu && mu > opts.tol_kkt / 10.0) {
            mu = std::max(opts.tol_kkt / 10.0, opts.mu_shrink * mu);
            for (int i = 0; i < ni; ++i) z(i) = std::max(z(i), 1e-10);
        }

        // Reduced KKT after eliminating (ds, dz):
        //   [H + Ji' (Z/S) Ji   Je'] [dx]   [-rx]
        //   [Je                  0 ] [dy] = [-ce]
        // Substituting dz = (Z/S)(ci + s + Ji dx) - z + mu/s into the dual
        // residual row collapses the z terms, leaving the barrier gradient:
        // rx = grad + Je' y + Ji' ((Z/S)(ci + s) + mu/s).
        Eigen::VectorXd rx = e.grad;
        if (ne > 0) rx += e.je.transpose() * y;
        if (ni > 0) {
            Eigen::VectorXd w(ni);
            for (int i = 0; i < ni; ++i) {
                w(i) = (z(i) / s(i)) * (e.ci(i) + s(i)) + mu / s(i);
            }
            rx += e.ji.transpose() * w;
        }

        const Eigen::MatrixXd h_curv = constraint_curvature(p, x, y, z);
        Eigen::MatrixXd h_base = h_curv;
        h_base.diagonal() += p.hessian_diag;
        if (ni > 0) {
            for (int i = 0; i < ni; ++i) {
                h_base += (z(i) / s(i)) * (e.ji.row(i).transpose() * e.ji.row(i));
            }
        }

        Eigen::VectorXd rhs(nx + ne);
        rhs.head(nx) = -rx;
        if (ne > 0) rhs.tail(ne) = -e.ce;

        // Inertia-corrected symmetric solve: a valid saddle point needs nx
        // positive and ne negative eigenvalues; otherwise convexify by
        // inflating the primal diagonal.
        Eigen::VectorXd dx(nx), dy(ne);
        bool solved = false;
        for (double reg = 0.0; reg <= 1e6 && !solved;
             reg = (reg == 0.0 ? 1e-8 : reg * 100.0)) {
            Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nx + ne, nx + ne);
            kkt.topLeftCorner(nx, nx) = h_base;
            kkt.topLeftCorner(nx, nx).diagonal().array() += reg;
            if (ne > 0) {
                kkt.topRightCorner(nx, ne) = e.je.transpose();
                kkt.bottomLeftCorner(ne, nx) = e.je;
                kkt.bottomRightCorner(ne, ne).diagonal().array() -= 1e-10;
            }
            const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(kkt);
            const Eigen::VectorXd& ev = eig.eigenvalues();
            int pos = 0, neg = 0;
            double min_abs = std::numeric_limits<double>::infinity();
            for (int i = 0; i < ev.size(); ++i) {
                if (ev(i) > 0.0) ++pos;
                if (ev(i) < 0.0) ++neg;
                min_abs = std::min(min_abs, std::abs(ev(i)));
            }
            if (pos != nx || neg != ne || min_abs < 1e-14) continue;
            const auto apply_inverse = [&](const Eigen::VectorXd& r) {
                return (eig.eigenvectors() *
                        (eig.eigenvalues().cwiseInverse().asDiagonal() *
                         (eig.eigenvectors().transpose() * r)))
                    .eval();
            };
            Eigen::VectorXd step = apply_inverse(rhs);
            // Iterative refinement: the objective curvature of the dispatch
            // axes dwarfs the network block, and the resulting spread eats
            // most of the double-precision budget in one plain solve.
            for (int ref = 0; ref < 2; ++ref) {
                step += apply_inverse(rhs - kkt * step);
            }
            if (!step.allFinite()) continue;
            dx = step.head(nx);
            if (ne > 0) dy = step.tail(ne);
            solved = true;
        }
        if (!solved) {
            x = restore_feasibility(p, x, 50);
            evaluate(p, x, e);
            if (restored_once) break;
            restored_once = true;
            for (int i = 0; i < ni; ++i) {
                s(i) = std::max(1e-3, -e.ci(i));
                z(i) = mu / s(i);
            }
            y.setZero();
            continue;
        }

        Eigen::VectorXd ds(ni), dz(ni);
        for (int i = 0; i < ni; ++i) {
            const double ji_dx = e.ji.row(i).dot(dx);
            ds(i) = -(e.ci(i) + s(i)) - ji_dx;
            dz(i) = -(z(i) / s(i)) * ds(i) - z(i) + mu / s(i);
        }

        // Keep the merit penalty above the multiplier scale so the computed
        // direction is a descent direction for it. The weight must also come
        // back down once the multipliers settle: holding on to a transient
        // spike (the cold-start duals can sit orders of magnitude too high)
        // makes Armijo reject every productive step afterwards, because any
        // Newton step re-violates the equalities by a second-order crumb
        // that an inflated penalty then dominates.
        const double mult_next =
            std::max(ne > 0 ? (y + dy).lpNorm<Eigen::Infinity>() : 0.0,
                     ni > 0 ? (z + dz).lpNorm<Eigen::Infinity>() : 0.0);
        const double nu_need = 2.0 * mult_next + 1.0;
        nu = nu_need > nu ? nu_need : std::max(nu_need, 0.5 * nu);

        const double alpha_s = ni > 0 ? fraction_to_boundary(s, ds, opts.tau) : 1.0;
        const double alpha_z = ni > 0 ? fraction_to_boundary(z, dz, opts.tau) : 1.0;

        // A recentring step after a barrier reduction can be smaller than the
        // noise floor of the merit function; measuring it with Armijo is a
        // coin flip, so such steps are accepted outright.
        const double step_scale =
            std::max(dx.lpNorm<Eigen::Infinity>(),
                     ni > 0 ? ds.lpNorm<Eigen::Infinity>() : 0.0);
        const double point_scale = 1.0 + x.lpNorm<Eigen::Infinity>() +
                                   (ni > 0 ? s.lpNorm<Eigen::Infinity>() : 0.0);
        if (step_scale <= 1e-10 * point_scale) {
            x += alpha_s * dx;
            s += alpha_s * ds;
            evaluate(p, x, e);
            if (ne > 0) y += dy;
            for (int i = 0; i < ni; ++i) {
                z(i) = std::max(1e-12, z(i) + alpha_z * dz(i));
            }
            continue;
        }

        const double phi0 = barrier_merit(e, s);
        const double theta0 = constraint_theta(e, s);
        double slope = e.grad.dot(dx) - nu * theta0;
        for (int i = 0; i < ni; ++i) slope -= mu * ds(i) / s(i);

        double alpha = alpha_s;
        bool accepted = false;
        Eval trial;
        for (int bt = 0; bt < 30; ++bt) {
            const Eigen::VectorXd x_try = x + alpha * dx;
            const Eigen::VectorXd s_try = s + alpha * ds;
            evaluate(p, x_try, trial);
            if (trial.grad.allFinite()) {
                const double phi_try = barrier_merit(trial, s_try);
                const bool armijo = phi_try <= phi0 + 1e-4 * alpha * std::min(slope, 0.0);
                const bool theta_progress =
                    constraint_theta(trial, s_try) <= 0.99 * theta0 && theta0 > 1e-10;
                if (armijo || theta_progress) {
                    x = x_try;
                    s = s_try;
                    e = trial;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }

#ifdef CCM_NLP_TRACE
        std::fprintf(stderr,
                     "      alpha=%9.2e a_s=%9.2e a_z=%9.2e nu=%9.2e |dx|=%9.2e acc=%d\n",
                     alpha, alpha_s, alpha_z, nu, dx.lpNorm<Eigen::Infinity>(),
                     accepted ? 1 : 0);
#endif
        if (!accepted) {
            x = restore_feasibility(p, x, 50);
            evaluate(p, x, e);
            if (restored_once) {
                ++iter;
                break;
            }
            restored_once = true;
            for (int i = 0; i < ni; ++i) {
                s(i) = std::max(1e-3, -e.ci(i));
                z(i) = mu / s(i);
            }
            y.setZero();
            continue;
        }

        if (ne > 0) y += alpha * dy;
        for (int i = 0; i < ni; ++i) {
            z(i) = std::max(1e-12, z(i) + alpha_z * dz(i));
        }
    }

    res.iterations = iter;
    // Classify the end state from the best point seen when not optimal.
    if (res.status != IpStatus::optimal) {
        Eval fin;
        evaluate(p, best_x, fin);
        const double eq_err = fin.ce.size() > 0 ? fin.ce.lpNorm<Eigen::Infinity>() : 0.0;
        const double in_err = ineq_violation(fin.ci);
        if (eq_err > 10.0 * opts.tol_eq || in_err > 10.0 * opts.tol_ineq) {
            res.status = IpStatus::infeasible;
            x = best_x;
            e = fin;
        } else {
            res.status = IpStatus::iteration_limit;
        }
    }

    res.x = x;
    res.eq_multipliers = y;
    res.ineq_multipliers = z;
    res.objective = e.f;
    res.max_eq_violation = e.ce.size() > 0 ? e.ce.lpNorm<Eigen::Infinity>() : 0.0;
    res.max_ineq_violation = ineq_violation(e.ci);
    return res;
}

} // namespace ccm::opf

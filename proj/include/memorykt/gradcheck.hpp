#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memorykt/params.hpp"
#include "memorykt/tape.hpp"

namespace memorykt::ad {

// Binds ParamStore entries onto a tape and remembers which node each name
// got, so analytic gradients can be read back after backward(). Binding the
// same name twice returns the same node, keeping the gradient in one buffer.
class ParamBinder {
public:
    ParamBinder(Tape<double>& tape, ParamStore<double>& store) : tape_(&tape), store_(&store) {}

    Var<double> operator()(const std::string& name) {
        for (const auto& [n, v] : bound_) {
            if (n == name) return v;
        }
        Var<double> v = tape_->leaf(store_->value(name));
        bound_.emplace_back(name, v);
        return v;
    }

    const std::vector<std::pair<std::string, Var<double>>>& bound() const { return bound_; }

private:
    Tape<double>* tape_;
    ParamStore<double>* store_;
    std::vector<std::pair<std::string, Var<double>>> bound_;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double eps = 1e-5;
    double tol = 1e-4;
    bool pass = true;

    double worst() const {
        double w = 0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

// Central-difference check of every parameter entry against the tape's
// analytic gradient. The builder must be deterministic across calls (any
// sampling inside it has to reuse a frozen seed).
//
// Relative error uses |a - n| / max(|a| + |n|, 1e-4); the floor keeps the
// ratio meaningful where both gradients are essentially zero.
inline GradCheckReport grad_check(
    ParamStore<double>& store,
    const std::function<Var<double>(Tape<double>&, ParamBinder&)>& build, double eps = 1e-5,
    double tol = 1e-4) {
    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;

    auto forward_loss = [&]() {
        Tape<double> tape;
        ParamBinder binder(tape, store);
        Var<double> loss = build(tape, binder);
        if (!tape.value(loss).all_finite()) {
            throw std::runtime_error("grad_check: non-finite loss value");
        }
        return tape.value(loss)[0];
    };

    // Analytic pass.
    Tape<double> tape;
    ParamBinder binder(tape, store);
    Var<double> loss = build(tape, binder);
    tape.backward(loss);

    for (const auto& [name, var] : binder.bound()) {
        const Tensor<double>& analytic = tape.grad(var);
        if (!analytic.all_finite()) {
            throw std::runtime_error("grad_check: non-finite gradient for " + name);
        }
        GradCheckEntry entry;
        entry.name = name;
        Tensor<double>& value = store.value(name);
        for (long i = 0; i < value.numel(); ++i) {
            const double orig = value[i];
            value[i] = orig + eps;
            const double fp = forward_loss();
            value[i] = orig - eps;
            const double fm = forward_loss();
            value[i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-4);
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(a));
        }
        entry.pass = entry.max_rel_err < tol;
        report.pass = report.pass && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace memorykt::ad

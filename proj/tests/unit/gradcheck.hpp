#ifndef MINIWEAVE_TESTS_GRADCHECK_HPP
#define MINIWEAVE_TESTS_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "miniweave/tensor.hpp"

// Central finite-difference oracle for autodiff gradients, run in 64-bit.
// The oracle only evaluates the forward path on perturbed copies, so it stays
// independent of the backward implementation it is checking.
namespace gradcheck {

using DTensor = miniweave::TensorT<double>;
using Fn = std::function<DTensor(const std::vector<DTensor>&)>;

inline double eval_at(const Fn& f, const std::vector<DTensor>& inputs) {
    std::vector<DTensor> copies;
    copies.reserve(inputs.size());
    for (const auto& t : inputs) copies.push_back(t.detach());
    return f(copies).item();
}

inline void check_gradients(const std::string& label, const Fn& f, std::vector<DTensor> inputs, double h = 1e-4,
                            double rtol = 1e-5, double atol = 1e-7) {
    // autodiff pass
    std::vector<DTensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(t.detach().set_requires_grad(true));
    DTensor loss = f(leaves);
    miniweave::backward(loss);

    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<double> ad(leaves[i].numel(), 0.0);
        if (leaves[i].has_grad()) ad = leaves[i].grad();
        std::vector<DTensor> probe;
        for (const auto& t : inputs) probe.push_back(t.detach());
        for (int64_t j = 0; j < probe[i].numel(); ++j) {
            double orig = probe[i].data()[j];
            probe[i].data()[j] = orig + h;
            double fp = eval_at(f, probe);
            probe[i].data()[j] = orig - h;
            double fm = eval_at(f, probe);
            probe[i].data()[j] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double tol = atol + rtol * std::abs(fd);
            INFO(label << ": input " << i << " element " << j << " ad=" << ad[static_cast<size_t>(j)]
                       << " fd=" << fd);
            CHECK(std::abs(ad[static_cast<size_t>(j)] - fd) <= tol);
        }
    }
}

}  // namespace gradcheck

#endif

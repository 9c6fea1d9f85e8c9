#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace memorykt::ad {

// Dense row-major tensor. Rank is dynamic but the library only ever builds
// rank-1 and rank-2 values ([B], [B x D], scalars as [1]).
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(checked_numel(shape_), S(0));
    }

    // Creation boundary for external data: validates size and finiteness.
    Tensor(std::vector<int> shape, std::vector<S> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (static_cast<std::size_t>(checked_numel(shape_)) != v_.size()) {
            throw std::invalid_argument("Tensor: value count " + std::to_string(v_.size()) +
                                        " does not match shape " + shape_str());
        }
        for (const S& x : v_) {
            if (!std::isfinite(static_cast<double>(x))) {
                throw std::invalid_argument("Tensor: non-finite value rejected at creation");
            }
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, S value) {
        Tensor t(std::move(shape));
        t.fill(value);
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    const std::vector<int>& shape() const { return shape_; }

    long numel() const { return static_cast<long>(v_.size()); }
    bool empty() const { return v_.empty(); }

    int rows() const {
        require_rank2("rows");
        return shape_[0];
    }
    int cols() const {
        require_rank2("cols");
        return shape_[1];
    }

    S* data() { return v_.data(); }
    const S* data() const { return v_.data(); }

    S& operator[](long i) { return v_[static_cast<std::size_t>(i)]; }
    const S& operator[](long i) const { return v_[static_cast<std::size_t>(i)]; }

    S& at(int r, int c) {
        require_rank2("at");
        return v_[static_cast<std::size_t>(r) * static_cast<std::size_t>(shape_[1]) +
                  static_cast<std::size_t>(c)];
    }
    const S& at(int r, int c) const {
        require_rank2("at");
        return v_[static_cast<std::size_t>(r) * static_cast<std::size_t>(shape_[1]) +
                  static_cast<std::size_t>(c)];
    }

    void fill(S value) { std::fill(v_.begin(), v_.end(), value); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const S& x : v_) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << 'x';
            os << shape_[i];
        }
        os << ']';
        return os.str();
    }

private:
    static long checked_numel(const std::vector<int>& shape) {
        long n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    void require_rank2(const char* what) const {
        if (shape_.size() != 2) {
            throw std::logic_error(std::string("Tensor::") + what + " requires rank 2, got " +
                                   shape_str());
        }
    }

    std::vector<int> shape_;
    std::vector<S> v_;
};

}  // namespace memorykt::ad

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "memorykt/tensor.hpp"

namespace memorykt::ad {

// Named trainable tensors plus per-parameter Adam moment buffers. Iteration
// always follows insertion order so optimizer sweeps and checkpoints are
// deterministic.
template <typename S>
class ParamStore {
public:
    void add(const std::string& name, Tensor<S> value) {
        if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        m_.push_back(Tensor<S>(value.shape()));
        v_.push_back(Tensor<S>(value.shape()));
        values_.push_back(std::move(value));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<S>& value(const std::string& name) { return values_[at(name)]; }
    const Tensor<S>& value(const std::string& name) const { return values_[at(name)]; }

    Tensor<S>& value_at(std::size_t i) { return values_[i]; }
    const Tensor<S>& value_at(std::size_t i) const { return values_[i]; }

    Tensor<S>& moment1_at(std::size_t i) { return m_[i]; }
    Tensor<S>& moment2_at(std::size_t i) { return v_[i]; }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }

    long total_entries() const {
        long n = 0;
        for (const auto& t : values_) n += t.numel();
        return n;
    }

    std::int64_t step_count = 0;  // completed Adam steps (for bias correction)

private:
    std::size_t at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParamStore: unknown name " + name);
        return it->second;
    }

    std::vector<std::string> names_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Tensor<S>> values_;
    std::vector<Tensor<S>> m_;
    std::vector<Tensor<S>> v_;
};

}  // namespace memorykt::ad

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace semalign {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixMap = Eigen::Map<MatrixX<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;

/// NCHW extents of a rank-4 feature map.
struct Shape4 {
    Index n = 0;
    Index c = 0;
    Index h = 0;
    Index w = 0;

    Index numel() const { return n * c * h * w; }
    Index plane() const { return h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

inline std::string Shape4::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
}

/// Dense rank-4 tensor in NCHW layout backed by a contiguous Eigen array.
template <typename Scalar>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape4 shape) : shape_(shape), data_(ArrayX<Scalar>::Zero(shape.numel())) {}
    Tensor(Index n, Index c, Index h, Index w) : Tensor(Shape4{n, c, h, w}) {}

    static Tensor constant(Shape4 shape, Scalar value) {
        Tensor t(shape);
        t.data_.setConstant(value);
        return t;
    }

    const Shape4& shape() const { return shape_; }
    Index n() const { return shape_.n; }
    Index c() const { return shape_.c; }
    Index h() const { return shape_.h; }
    Index w() const { return shape_.w; }
    Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }
    ArrayX<Scalar>& array() { return data_; }
    const ArrayX<Scalar>& array() const { return data_; }

    Scalar& operator()(Index b, Index ch, Index y, Index x) {
        return data_[((b * shape_.c + ch) * shape_.h + y) * shape_.w + x];
    }
    Scalar operator()(Index b, Index ch, Index y, Index x) const {
        return data_[((b * shape_.c + ch) * shape_.h + y) * shape_.w + x];
    }

    /// Sample `b` viewed as a [C, H*W] row-major matrix.
    MatrixMap<Scalar> sample(Index b) {
        return MatrixMap<Scalar>(data() + b * shape_.c * shape_.plane(), shape_.c, shape_.plane());
    }
    ConstMatrixMap<Scalar> sample(Index b) const {
        return ConstMatrixMap<Scalar>(data() + b * shape_.c * shape_.plane(), shape_.c,
                                      shape_.plane());
    }

    /// Channel plane viewed as an [H, W] row-major matrix.
    MatrixMap<Scalar> plane(Index b, Index ch) {
        return MatrixMap<Scalar>(data() + (b * shape_.c + ch) * shape_.plane(), shape_.h, shape_.w);
    }
    ConstMatrixMap<Scalar> plane(Index b, Index ch) const {
        return ConstMatrixMap<Scalar>(data() + (b * shape_.c + ch) * shape_.plane(), shape_.h,
                                      shape_.w);
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out(shape_);
        out.array() = data_.template cast<Other>();
        return out;
    }

    bool all_finite() const { return data_.allFinite(); }

private:
    Shape4 shape_{};
    ArrayX<Scalar> data_;
};

/// Per-pixel integer labels [N, H, W]; 255 marks ignored pixels.
struct LabelMap {
    static constexpr std::uint8_t kIgnore = 255;

    Index n = 0;
    Index h = 0;
    Index w = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(Index n_, Index h_, Index w_, std::uint8_t fill = 0)
        : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

    std::uint8_t& operator()(Index b, Index y, Index x) {
        return data[static_cast<std::size_t>((b * h + y) * w + x)];
    }
    std::uint8_t operator()(Index b, Index y, Index x) const {
        return data[static_cast<std::size_t>((b * h + y) * w + x)];
    }
    Index size() const { return static_cast<Index>(data.size()); }
    bool operator==(const LabelMap&) const = default;
};

/// Which part of the model owns a parameter; drives freezing and weight decay.
enum class ParamGroup {
    encoder,
    text_encoder,
    projection,
    decoder,
    classifier,
    norm,
    prototypes,
    context,
    text_projection,
    buffer,
};

const char* to_string(ParamGroup group);

template <typename Scalar>
struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::decoder;
    bool trainable = true;
    bool decay = true;
    MatrixX<Scalar> value;
    MatrixX<Scalar> grad;

    Parameter() = default;
    Parameter(std::string name_, ParamGroup group_, Index rows, Index cols, bool trainable_ = true,
              bool decay_ = true)
        : name(std::move(name_)),
          group(group_),
          trainable(trainable_),
          decay(decay_),
          value(MatrixX<Scalar>::Zero(rows, cols)),
          grad(MatrixX<Scalar>::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(); }
};

template <typename Scalar>
using ParameterRefs = std::vector<Parameter<Scalar>*>;

}  // namespace semalign

#include "stainforge/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace stainforge {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(shape), data_(data.begin(), data.end()) {
  if (data_.size() != shape_.size())
    throw std::invalid_argument("tensor data does not match shape " +
                                shape_.str());
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw std::logic_error("item() on tensor of shape " + shape_.str());
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw std::invalid_argument("shape mismatch " + shape_.str() + " vs " +
                                other.shape_.str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

}  // namespace stainforge

#include "tsfuse/diffcore.hpp"

#include <cmath>

namespace tsfuse::diff {

namespace {

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

}  // namespace

std::string Tape::shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw ValidationError("Tape: var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

Var Tape::input(Matrix value) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::constant(Matrix value) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(value);
    return push(std::move(n));
}

void Tape::check_same_or_scalar(const char* op, const Matrix& a, const Matrix& b) const {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return;
    if (is_scalar(a) || is_scalar(b)) return;
    throw ValidationError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                          shape_str(b));
}

Var Tape::matmul(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.cols() != bv.rows())
        throw ValidationError("matmul: inner dimensions disagree, " + shape_str(av) + " * " +
                              shape_str(bv));
    Node n;
    n.op = Op::MatMul;
    n.in = {a.id, b.id, -1};
    n.value = av * bv;
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    check_same_or_scalar("add", av, bv);
    Node n;
    n.op = Op::Add;
    n.in = {a.id, b.id, -1};
    if (is_scalar(av) && !is_scalar(bv))
        n.value = bv.array() + av(0, 0);
    else if (is_scalar(bv) && !is_scalar(av))
        n.value = av.array() + bv(0, 0);
    else
        n.value = av + bv;
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    check_same_or_scalar("sub", av, bv);
    Node n;
    n.op = Op::Sub;
    n.in = {a.id, b.id, -1};
    if (is_scalar(av) && !is_scalar(bv))
        n.value = av(0, 0) - bv.array();
    else if (is_scalar(bv) && !is_scalar(av))
        n.value = av.array() - bv(0, 0);
    else
        n.value = av - bv;
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    check_same_or_scalar("mul", av, bv);
    Node n;
    n.op = Op::Mul;
    n.in = {a.id, b.id, -1};
    if (is_scalar(av) && !is_scalar(bv))
        n.value = bv.array() * av(0, 0);
    else if (is_scalar(bv) && !is_scalar(av))
        n.value = av.array() * bv(0, 0);
    else
        n.value = av.cwiseProduct(bv);
    return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
    Node n;
    n.op = Op::Scale;
    n.in = {a.id, -1, -1};
    n.c = c;
    n.value = value(a) * c;
    return push(std::move(n));
}

Var Tape::scale_shift(Var x, Var a, Var b) {
    const Matrix& xv = value(x);
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (xv.rows() != av.rows() || xv.cols() != av.cols() || xv.rows() != bv.rows() ||
        xv.cols() != bv.cols())
        throw ValidationError("scale_shift: all operands must share shape, got " + shape_str(xv) +
                              ", " + shape_str(av) + ", " + shape_str(bv));
    Node n;
    n.op = Op::ScaleShift;
    n.in = {x.id, a.id, b.id};
    n.value = xv.cwiseProduct(av) + bv;
    return push(std::move(n));
}

Var Tape::tanh(Var a) {
    Node n;
    n.op = Op::Tanh;
    n.in = {a.id, -1, -1};
    n.value = value(a).array().tanh();
    return push(std::move(n));
}

Var Tape::sin(Var a) {
    Node n;
    n.op = Op::Sin;
    n.in = {a.id, -1, -1};
    n.value = value(a).array().sin();
    return push(std::move(n));
}

Var Tape::relu(Var a) {
    Node n;
    n.op = Op::Relu;
    n.in = {a.id, -1, -1};
    n.value = value(a).cwiseMax(0.0);
    return push(std::move(n));
}

Var Tape::leaky_relu(Var a, double slope) {
    const Matrix& av = value(a);
    Node n;
    n.op = Op::LeakyRelu;
    n.in = {a.id, -1, -1};
    n.c = slope;
    n.value = (av.array() > 0.0).select(av, av * slope);
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.in = {a.id, -1, -1};
    n.value = Matrix::Constant(1, 1, value(a).sum());
    return push(std::move(n));
}

Var Tape::mean_rows(Var a) {
    const Matrix& av = value(a);
    if (av.rows() < 1) throw ValidationError("mean_rows: needs at least one row");
    Node n;
    n.op = Op::MeanRows;
    n.in = {a.id, -1, -1};
    n.value = av.colwise().mean().transpose();
    return push(std::move(n));
}

Var Tape::transpose(Var a) {
    Node n;
    n.op = Op::Transpose;
    n.in = {a.id, -1, -1};
    n.value = value(a).transpose();
    return push(std::move(n));
}

Var Tape::vconcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ValidationError("vconcat: no parts");
    Eigen::Index rows = 0;
    for (Var p : parts) {
        if (value(p).cols() != 1)
            throw ValidationError("vconcat: parts must be column vectors");
        rows += value(p).rows();
    }
    Node n;
    n.op = Op::VConcat;
    n.value = Matrix(rows, 1);
    Eigen::Index at = 0;
    for (Var p : parts) {
        n.extra_in.push_back(p.id);
        n.value.block(at, 0, value(p).rows(), 1) = value(p);
        at += value(p).rows();
    }
    return push(std::move(n));
}

Var Tape::add_rowwise(Var m, Var row) {
    const Matrix& mv = value(m);
    const Matrix& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != mv.cols())
        throw ValidationError("add_rowwise: expected 1x" + std::to_string(mv.cols()) +
                              " row, got " + shape_str(rv));
    Node n;
    n.op = Op::AddRowwise;
    n.in = {m.id, row.id, -1};
    n.value = mv.rowwise() + rv.row(0);
    return push(std::move(n));
}

Var Tape::scale_rows(Var m, Var s) {
    const Matrix& mv = value(m);
    const Matrix& sv = value(s);
    if (sv.cols() != 1 || sv.rows() != mv.rows())
        throw ValidationError("scale_rows: expected " + std::to_string(mv.rows()) +
                              "x1 scale vector, got " + shape_str(sv));
    Node n;
    n.op = Op::ScaleRows;
    n.in = {m.id, s.id, -1};
    n.value = mv.array().colwise() * sv.col(0).array();
    return push(std::move(n));
}

Var Tape::outer_sum(Var f, Var g) {
    const Matrix& fv = value(f);
    const Matrix& gv = value(g);
    if (fv.cols() != 1 || gv.cols() != 1 || fv.rows() != gv.rows())
        throw ValidationError("outer_sum: expects equal-length column vectors, got " +
                              shape_str(fv) + " and " + shape_str(gv));
    Node n;
    n.op = Op::OuterSum;
    n.in = {f.id, g.id, -1};
    const Eigen::Index d = fv.rows();
    n.value = fv.col(0).replicate(1, d) + gv.col(0).transpose().replicate(d, 1);
    return push(std::move(n));
}

Var Tape::softmax_masked(Var scores, const Matrix& mask) {
    const Matrix& sv = value(scores);
    if (sv.rows() != mask.rows() || sv.cols() != mask.cols())
        throw ValidationError("softmax_masked: scores " + shape_str(sv) + " vs mask " +
                              shape_str(mask));
    Node n;
    n.op = Op::SoftmaxMasked;
    n.in = {scores.id, -1, -1};
    n.saved = mask;
    n.value = Matrix::Zero(sv.rows(), sv.cols());
    for (Eigen::Index i = 0; i < sv.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < sv.cols(); ++j)
            if (mask(i, j) > 0.0) mx = std::max(mx, sv(i, j));
        if (!std::isfinite(mx))
            throw ValidationError("softmax_masked: row " + std::to_string(i) +
                                  " of mask has no positive entry");
        double denom = 0.0;
        for (Eigen::Index j = 0; j < sv.cols(); ++j)
            if (mask(i, j) > 0.0) denom += std::exp(sv(i, j) - mx);
        for (Eigen::Index j = 0; j < sv.cols(); ++j)
            if (mask(i, j) > 0.0) n.value(i, j) = std::exp(sv(i, j) - mx) / denom;
    }
    return push(std::move(n));
}

Var Tape::conv1d_same(Var x, Var kernels, Var bias) {
    const Matrix& xv = value(x);
    const Matrix& kv = value(kernels);
    const Matrix& bv = value(bias);
    if (xv.cols() != 1) throw ValidationError("conv1d_same: signal must be Lx1");
    if (xv.rows() < 1) throw ValidationError("conv1d_same: empty input signal");
    if (kv.rows() != 5)
        throw ValidationError("conv1d_same: kernels must be 5xF, got " + shape_str(kv));
    if (bv.cols() != 1 || bv.rows() != kv.cols())
        throw ValidationError("conv1d_same: bias must be Fx1, got " + shape_str(bv));
    const Eigen::Index len = xv.rows();
    const Eigen::Index filters = kv.cols();
    Node n;
    n.op = Op::Conv1dSame;
    n.in = {x.id, kernels.id, bias.id};
    n.value = Matrix(len, filters);
    for (Eigen::Index f = 0; f < filters; ++f) {
        for (Eigen::Index t = 0; t < len; ++t) {
            double acc = bv(f, 0);
            for (Eigen::Index j = 0; j < 5; ++j) {
                const Eigen::Index u = t + j - 2;
                if (u >= 0 && u < len) acc += kv(j, f) * xv(u, 0);
            }
            n.value(t, f) = acc;
        }
    }
    return push(std::move(n));
}

Var Tape::layer_norm_rows(Var m, Var gain, Var bias, double eps) {
    const Matrix& mv = value(m);
    const Matrix& gv = value(gain);
    const Matrix& bv = value(bias);
    if (gv.rows() != 1 || gv.cols() != mv.cols() || bv.rows() != 1 || bv.cols() != mv.cols())
        throw ValidationError("layer_norm_rows: gain/bias must be 1x" +
                              std::to_string(mv.cols()));
    Node n;
    n.op = Op::LayerNormRows;
    n.in = {m.id, gain.id, bias.id};
    n.c = eps;
    n.saved = Matrix(mv.rows(), mv.cols());   // normalized rows
    n.saved2 = Matrix(mv.rows(), 1);          // 1 / sqrt(var + eps)
    n.value = Matrix(mv.rows(), mv.cols());
    for (Eigen::Index i = 0; i < mv.rows(); ++i) {
        const double mean = mv.row(i).mean();
        const double var = (mv.row(i).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + eps);
        n.saved2(i, 0) = inv;
        n.saved.row(i) = (mv.row(i).array() - mean) * inv;
        n.value.row(i) = n.saved.row(i).cwiseProduct(gv.row(0)) + bv.row(0);
    }
    return push(std::move(n));
}

Gradients Tape::backward(Var loss) const {
    const Matrix& lv = value(loss);
    if (!is_scalar(lv))
        throw ValidationError("backward: loss must be a 1x1 scalar, got " + shape_str(lv));

    std::vector<Matrix> bar(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        bar[i] = Matrix::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
    bar[static_cast<std::size_t>(loss.id)](0, 0) = 1.0;

    auto acc = [&](int id, const Matrix& g) {
        const Matrix& v = nodes_[static_cast<std::size_t>(id)].value;
        if (is_scalar(v) && !(g.rows() == 1 && g.cols() == 1))
            bar[static_cast<std::size_t>(id)](0, 0) += g.sum();
        else
            bar[static_cast<std::size_t>(id)] += g;
    };

    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        const Node& n = nodes_[static_cast<std::size_t>(i)];
        const Matrix& g = bar[static_cast<std::size_t>(i)];
        switch (n.op) {
            case Op::Input:
            case Op::Constant:
                break;
            case Op::MatMul: {
                const Matrix& a = nodes_[n.in[0]].value;
                const Matrix& b = nodes_[n.in[1]].value;
                acc(n.in[0], g * b.transpose());
                acc(n.in[1], a.transpose() * g);
                break;
            }
            case Op::Add:
                acc(n.in[0], g);
                acc(n.in[1], g);
                break;
            case Op::Sub:
                acc(n.in[0], g);
                acc(n.in[1], -g);
                break;
            case Op::Mul: {
                const Matrix& a = nodes_[n.in[0]].value;
                const Matrix& b = nodes_[n.in[1]].value;
                if (is_scalar(a) && !is_scalar(b)) {
                    acc(n.in[0], Matrix::Constant(1, 1, g.cwiseProduct(b).sum()));
                    acc(n.in[1], g * a(0, 0));
                } else if (is_scalar(b) && !is_scalar(a)) {
                    acc(n.in[0], g * b(0, 0));
                    acc(n.in[1], Matrix::Constant(1, 1, g.cwiseProduct(a).sum()));
                } else {
                    acc(n.in[0], g.cwiseProduct(b));
                    acc(n.in[1], g.cwiseProduct(a));
                }
                break;
            }
            case Op::Scale:
                acc(n.in[0], g * n.c);
                break;
            case Op::ScaleShift: {
                const Matrix& x = nodes_[n.in[0]].value;
                const Matrix& a = nodes_[n.in[1]].value;
                acc(n.in[0], g.cwiseProduct(a));
                acc(n.in[1], g.cwiseProduct(x));
                acc(n.in[2], g);
                break;
            }
            case Op::Tanh:
                acc(n.in[0], g.cwiseProduct((1.0 - n.value.array().square()).matrix()));
                break;
            case Op::Sin: {
                const Matrix& x = nodes_[n.in[0]].value;
                acc(n.in[0], g.cwiseProduct(x.array().cos().matrix()));
                break;
            }
            case Op::Relu: {
                const Matrix& x = nodes_[n.in[0]].value;
                acc(n.in[0], (x.array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols())));
                break;
            }
            case Op::LeakyRelu: {
                const Matrix& x = nodes_[n.in[0]].value;
                acc(n.in[0], (x.array() > 0.0).select(g, g * n.c));
                break;
            }
            case Op::Sum: {
                const Matrix& x = nodes_[n.in[0]].value;
                acc(n.in[0], Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
                break;
            }
            case Op::MeanRows: {
                const Matrix& x = nodes_[n.in[0]].value;
                const double inv = 1.0 / static_cast<double>(x.rows());
                Matrix gm(x.rows(), x.cols());
                for (Eigen::Index r = 0; r < x.rows(); ++r)
                    gm.row(r) = g.col(0).transpose() * inv;
                acc(n.in[0], gm);
                break;
            }
            case Op::Transpose:
                acc(n.in[0], g.transpose());
                break;
            case Op::VConcat: {
                Eigen::Index at = 0;
                for (int pid : n.extra_in) {
                    const Eigen::Index r = nodes_[pid].value.rows();
                    acc(pid, g.block(at, 0, r, 1));
                    at += r;
                }
                break;
            }
            case Op::AddRowwise:
                acc(n.in[0], g);
                acc(n.in[1], g.colwise().sum());
                break;
            case Op::ScaleRows: {
                const Matrix& m = nodes_[n.in[0]].value;
                const Matrix& s = nodes_[n.in[1]].value;
                acc(n.in[0], g.array().colwise() * s.col(0).array());
                acc(n.in[1], g.cwiseProduct(m).rowwise().sum());
                break;
            }
            case Op::OuterSum:
                acc(n.in[0], g.rowwise().sum());
                acc(n.in[1], g.colwise().sum().transpose());
                break;
            case Op::SoftmaxMasked: {
                const Matrix& y = n.value;
                Matrix gs = Matrix::Zero(y.rows(), y.cols());
                for (Eigen::Index r = 0; r < y.rows(); ++r) {
                    const double dot = g.row(r).cwiseProduct(y.row(r)).sum();
                    for (Eigen::Index c = 0; c < y.cols(); ++c)
                        if (n.saved(r, c) > 0.0) gs(r, c) = y(r, c) * (g(r, c) - dot);
                }
                acc(n.in[0], gs);
                break;
            }
            case Op::Conv1dSame: {
                const Matrix& x = nodes_[n.in[0]].value;
                const Matrix& k = nodes_[n.in[1]].value;
                const Eigen::Index len = x.rows();
                const Eigen::Index filters = k.cols();
                Matrix gx = Matrix::Zero(len, 1);
                Matrix gk = Matrix::Zero(5, filters);
                for (Eigen::Index f = 0; f < filters; ++f) {
                    for (Eigen::Index t = 0; t < len; ++t) {
                        const double go = g(t, f);
                        if (go == 0.0) continue;
                        for (Eigen::Index j = 0; j < 5; ++j) {
                            const Eigen::Index u = t + j - 2;
                            if (u >= 0 && u < len) {
                                gk(j, f) += go * x(u, 0);
                                gx(u, 0) += go * k(j, f);
                            }
                        }
                    }
                }
                acc(n.in[0], gx);
                acc(n.in[1], gk);
                acc(n.in[2], g.colwise().sum().transpose());
                break;
            }
            case Op::LayerNormRows: {
                const Matrix& gain = nodes_[n.in[1]].value;
                const Matrix& xhat = n.saved;
                const Eigen::Index cols = xhat.cols();
                Matrix gx(xhat.rows(), cols);
                Matrix ggain = Matrix::Zero(1, cols);
                Matrix gbias = Matrix::Zero(1, cols);
                for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    ggain += g.row(r).cwiseProduct(xhat.row(r));
                    gbias += g.row(r);
                    const Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gain.row(0));
                    const double mean_dxhat = dxhat.mean();
                    const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).mean();
                    gx.row(r) = n.saved2(r, 0) *
                                (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
                }
                acc(n.in[0], gx);
                acc(n.in[1], ggain);
                acc(n.in[2], gbias);
                break;
            }
        }
    }
    return Gradients(std::move(bar));
}

}  // namespace tsfuse::diff

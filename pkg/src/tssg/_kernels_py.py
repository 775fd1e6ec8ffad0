"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point summation order, so the two backends agree
bit-for-bit on the tensor kernels and to rounding on the line filters.
"""
import numpy as np

# (dy, dx) order of the 3x3 taps inside an im2col column block
_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def im2col3x3(x):
    """[N, C, H, W] -> [N, C*9, H*W] with one pixel of zero padding."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 9, h, w), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def col2im3x3(cols, h, w):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back onto the image."""
    n, ck, _ = cols.shape
    c = ck // 9
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        xp[:, :, dy:dy + h, dx:dx + w] += cols[:, :, k]
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def maxpool2x2(x):
    """2x2/stride-2 max pool. Returns (values, flat plane indices).

    Ties go to the lowest flat index, which is the first window cell in
    row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + arg // 2
    colsx = 2 * np.arange(wo)[None, :] + arg % 2
    idx = (rows * w + colsx).astype(np.int64)
    return np.ascontiguousarray(out), idx


def unpool2x2(x, idx, h, w):
    """Scatter ``x`` to the recorded argmax positions of an [.., h, w] plane."""
    n, c = x.shape[:2]
    out = np.zeros((n, c, h * w), dtype=x.dtype)
    np.put_along_axis(out, idx.reshape(n, c, -1), x.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, h, w)


def unpool2x2_gather(g, idx):
    """Adjoint of :func:`unpool2x2` (and backward of the max pool)."""
    n, c = g.shape[:2]
    flat = g.reshape(n, c, -1)
    return np.take_along_axis(flat, idx.reshape(n, c, -1), axis=-1).reshape(idx.shape)


def _half_window_weights(r):
    sigma = r / 2.0
    d = np.arange(r + 1, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def interval_gradient_lines(lines, r):
    """Interval gradient of every row of ``lines`` ([M, L] float64) -> [M, L-1].

    Position p sits between samples p and p+1. The right mean covers samples
    p+1 .. p+1+r, the left mean covers p-r .. p, both Gaussian weighted by
    distance from their inner edge and renormalised where the window is
    clipped by the line ends.
    """
    m, length = lines.shape
    wts = _half_window_weights(r)
    npos = length - 1
    rnum = np.zeros((m, npos))
    rden = np.zeros(npos)
    lnum = np.zeros((m, npos))
    lden = np.zeros(npos)
    for d in range(r + 1):
        # right: sample p+1+d exists for p <= L-2-d
        cnt = npos - d
        if cnt > 0:
            rnum[:, :cnt] += wts[d] * lines[:, 1 + d:1 + d + cnt]
            rden[:cnt] += wts[d]
        # left: sample p-d exists for p >= d
        if d < npos:
            lnum[:, d:] += wts[d] * lines[:, :npos - d]
            lden[d:] += wts[d]
    return rnum / rden - lnum / lden


def rescale_lines(lines, r, eps_s):
    """Gradient rescaling for [C, M, L] lines sharing one weight per position.

    With C == 1 the weight is the grayscale ratio; with C == 3 the channel
    magnitudes are summed before taking the ratio, and the stabilising
    constant is scaled by C so identical channels reproduce the grayscale
    weight. Returns
    ``(rescaled [C, M, L-1], weight [M, L-1])``.
    """
    nch = lines.shape[0]
    grads = np.diff(lines, axis=-1)
    igrads = np.stack([interval_gradient_lines(lines[c], r) for c in range(nch)])
    num = np.zeros(grads.shape[1:])
    den = np.zeros(grads.shape[1:])
    for c in range(nch):
        num += np.abs(igrads[c])
        den += np.abs(grads[c])
    weight = np.minimum(1.0, (num + nch * eps_s) / (den + nch * eps_s))
    keep = np.sign(grads) == np.sign(igrads)
    return np.where(keep, grads * weight, 0.0), weight

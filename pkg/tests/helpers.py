import numpy as np

from cornercase.tensor_core import Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, Softmax


def central_difference(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def brute_force_blur(image, kernel):
    """3x3 convolution with edge replication, one pixel at a time."""
    h, w, c = image.shape
    out = np.zeros_like(image)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        acc += kernel[dy + 1, dx + 1] * image[yy, xx, ch]
                out[y, x, ch] = acc
    return out


def max_rel_error(a, b):
    """Largest absolute deviation relative to the larger gradient's max magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max())
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def random_small_net(rng, kind: str):
    """Small networks that together exercise every layer kind."""
    if kind == "dense":
        layers = [Flatten(), Dense(16, 8), ReLU(), Dense(8, 3), Softmax()]
        shape = (4, 4, 1)
    elif kind == "conv":
        layers = [Conv2D(3, 3, 2, 3), ReLU(), Flatten(), Dense(3 * 3 * 3, 4), Softmax()]
        shape = (5, 5, 2)
    else:
        layers = [Conv2D(2, 2, 1, 2), ReLU(), MaxPool2D(), Flatten(), Dense(2 * 2 * 2, 3), Softmax()]
        shape = (5, 5, 1)
    net = Network(layers, shape, name=kind).init_params(int(rng.integers(1 << 30)))
    for layer in net.layers:
        if layer.params:
            # non-zero biases so ReLU kinks are not hit at exactly zero
            layer.set_params([layer.params[0], rng.normal(0, 0.3, layer.params[1].shape)])
    return net


def kink_margin(net, X) -> float:
    """Distance of batch ``X`` from the nearest non-differentiable point of ``net``.

    That is the smallest |ReLU input| or gap between the two largest values of a pooling window.
    """
    a = np.asarray(X, dtype=np.float64)
    if a.ndim == len(net.input_shape):
        a = a[None]
    margin = np.inf
    for layer in net.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(a).min()))
        elif isinstance(layer, MaxPool2D):
            n, h, w, c = a.shape
            win = a[:, : h // 2 * 2, : w // 2 * 2].reshape(n, h // 2, 2, w // 2, 2, c)
            win = np.sort(win.transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4), axis=1)
            margin = min(margin, float((win[:, -1] - win[:, -2]).min()))
        a = layer.forward(a)[0]
    return margin


def toy_ensemble():
    """Three hand-set 4x4 single-channel classifiers (dense-only, 3 classes)."""
    from cornercase.model_zoo import ModelEnsemble

    ramp = np.linspace(-1.0, 1.0, 16)
    checker = np.where(np.indices((4, 4)).sum(axis=0) % 2 == 0, 1.0, -1.0).ravel()
    models = []
    for m, (scale, mix) in enumerate(((2.0, 0.0), (1.5, 0.5), (1.0, 1.0))):
        net = Network([Flatten(), Dense(16, 4), ReLU(), Dense(4, 3), Softmax()], (4, 4, 1), name=f"toy{m}")
        W1 = np.stack([ramp, -ramp, checker * 0.5, np.ones(16) * 0.25], axis=1) * scale
        b1 = np.array([0.1, 0.1, 0.2, -0.5 + 0.2 * m])
        W2 = np.array([
            [1.0, -0.5, 0.2 * mix],
            [-0.5, 1.0, 0.1],
            [0.3, 0.3 * mix, -0.2],
            [0.8, 0.5, 1.0 + mix],
        ])
        b2 = np.array([0.0, 0.1 * m, -0.3])
        net.set_params([(), (W1, b1), (), (W2, b2), ()])
        models.append(net)
    return ModelEnsemble(tuple(models))


def toy_seeds(agree=True, n=5):
    from cornercase import generator as G

    ens = toy_ensemble()
    rng = np.random.default_rng(0)
    out = []
    while len(out) < n:
        x = rng.uniform(0.2, 0.8, size=(4, 4, 1))
        if (G.detect_divergence(G.replay_labels(ens, x)) is None) == agree:
            out.append(x)
    return ens, out


def joint_at(ens, x, c, j, lam1, lam2, target):
    from cornercase import generator as G
    from cornercase.coverage import neuron_activations

    probs, acts = zip(*(m.forward(x) for m in ens))
    fn = neuron_activations(ens[0], acts[0])[target] if target is not None else 0.0
    return G.obj_joint(G.obj_differential(probs, c, j, lam1), fn, lam2)


def first_brightness_step(ens, x, seed_id, config):
    """Brute-force brightness sweep around seed ``x`` next to the generator's first accepted step.

    Returns (uphill sign of the swept curve, objective at the seed, bias of the first step,
    objective at that bias).
    """
    from cornercase import generator as G
    from cornercase import transforms as T
    from cornercase.coverage import CoverageMap, neuron_activations

    labels = G.replay_labels(ens, x)
    c = labels[0]
    j = int(np.argmin([m.forward(x)[0][c] for m in ens]))
    # same target the generator draws: fresh maps, seed processed, then one draw
    maps = [CoverageMap(m, config.threshold) for m in ens]
    for m, cmap in zip(ens, maps):
        cmap.update(neuron_activations(m, m.forward(x)[1]))
    target = maps[0].select_uncovered(np.random.default_rng([config.rng_seed, seed_id]))

    def f(b):
        return joint_at(ens, T.apply(x, T.BrightnessContrast(1.0, b)), c, j, config.lambda1, config.lambda2, target)

    sweep = np.round(np.arange(-50, 51) * 0.01, 2)
    curve = np.array([f(b) for b in sweep])
    zero = int(np.flatnonzero(sweep == 0)[0])
    uphill = np.sign(curve[zero + 1] - curve[zero - 1])
    steps = []
    G.generate_from_seed(ens, x, c, config, [CoverageMap(m) for m in ens], seed_id,
                         callback=lambda it, im, p: steps.append((it, im)))
    if not steps or steps[0][0] != 1:
        return uphill, curve[zero], None, None
    bias = float(np.mean(steps[0][1] - x))
    return uphill, curve[zero], bias, f(bias)

import numpy as np

from marginrepair import HeadModel


def random_model(seed, d_in=4, d_out=4, n_classes=3, activation="tanh", scale=1.0):
    rng = np.random.default_rng(seed)
    return HeadModel(
        W=scale * rng.standard_normal((d_out, d_in)),
        b=0.1 * rng.standard_normal(d_out),
        W_c=scale * rng.standard_normal((n_classes, d_out)),
        b_c=0.1 * rng.standard_normal(n_classes),
        activation=activation,
    )

import numpy as np

from vcnn import model as M
from vcnn import train as T
from vcnn.niftio import gen_phantom, preprocess


def tiny_model(seed=0, dtype="f64"):
    """Same block structure at 16^3 and a sixteenth of the width."""
    m = M.build_model_3d(input_size=16, width_divisor=16, conv_padding="same", model_id="tiny")
    return M.init_params(m, seed, dtype=dtype)


def phantom_set(m, seeds, size=None, noise=0.05):
    """One phantom per (class, seed), laid out for ``m``."""
    size = m.input_shape[0] if size is None else size
    xs, ys, ids = [], [], []
    for c in range(3):
        for s in seeds:
            v = preprocess(gen_phantom(c, s, noise=noise), size)
            xs.append(M.volume_to_input(m, v.voxels))
            ys.append(c)
            ids.append(v.subject_id)
    return T.Dataset(np.stack(xs), np.array(ys), ids)

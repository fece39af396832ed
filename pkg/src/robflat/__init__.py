"""Average- and worst-case flatness of the robust loss in weight space.

Modules:

* ``nn``: a small fully connected network with hand-written backprop.
* ``geometry``: the relative per-layer ball, direction normalization, layer rescaling.
* ``attacks``: L-infinity PGD with restarts.
* ``flatness``: average- and worst-case flatness, 1-D landscape profiles.
* ``hessian``: Hessian-vector products and extreme eigenvalues.
* ``training``: adversarial training and its regularized variants.
* ``data``, ``checkpoint``, ``config``, ``experiment``, ``cli``: the operational shell.
"""

__version__ = "0.1.0"

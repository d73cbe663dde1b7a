"""Independent reference implementations used only by the tests.

Two oracles live here, each deliberately built on different machinery
than the package:

* `torch_gradients` re-expresses the spiking forward pass as a torch
  computation graph (custom spike autograd function, explicit unroll over
  timesteps) and lets autograd produce the weight gradients.
* `cuba_reference` re-runs the fixed-point neuron update with plain
  Python integers and naive nested loops, so any vectorisation or dtype
  mistake in the package's integer path shows up as a bit difference.
"""

import numpy as np
import torch
import torch.nn.functional as F

from evsnn.network import CONV, DENSE, POOL, POOLING_LINEAR


class _Spike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, v_th, a1):
        ctx.save_for_backward(u)
        ctx.v_th = v_th
        ctx.a1 = a1
        return (u >= v_th).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (u,) = ctx.saved_tensors
        window = ((u - ctx.v_th).abs() < ctx.a1 / 2.0).to(u.dtype) / ctx.a1
        return grad_out * window, None, None


def _pool_sum(x, k):
    # ceil-mode: zero-pad up to a multiple of k, then block-sum
    b, c, h, w = x.shape
    ph = (-h) % k
    pw = (-w) % k
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    oh, ow = (h + ph) // k, (w + pw) // k
    return x.reshape(b, c, oh, k, ow, k).sum(dim=(3, 5))


def torch_gradients(network, frame_bits, target, frame_repeat, pooling="spiking", reset_grad="detached"):
    """Weight/bias gradients of the frame loss via torch autograd.

    Returns (weight grads by layer index, bias grads, loss value).
    """
    lif = network.lif
    ws = {}
    bs = {}
    for li, layer in enumerate(network.layers):
        if layer.learnable:
            ws[li] = torch.tensor(layer.weight, dtype=torch.float64, requires_grad=True)
            bs[li] = torch.tensor(layer.bias, dtype=torch.float64, requires_grad=True)

    x = torch.tensor(np.asarray(frame_bits, dtype=np.float64)).unsqueeze(0)
    u = {}
    o = {}
    outs = []
    for _ in range(frame_repeat):
        inp = x
        for li, layer in enumerate(network.layers):
            if layer.kind == POOL:
                drive = _pool_sum(inp, layer.kernel) * layer.pool_weight
                if pooling == POOLING_LINEAR:
                    inp = drive
                    continue
            elif layer.kind == CONV:
                drive = F.conv2d(inp, ws[li], bias=bs[li], padding=layer.padding)
            else:
                drive = F.linear(inp.reshape(1, -1), ws[li], bs[li])
            u_prev = u.get(li)
            if u_prev is None:
                u_new = drive
            else:
                gate = 1.0 - (o[li] if reset_grad == "full" else o[li].detach())
                u_new = u_prev * lif.tau * gate + drive
            s = _Spike.apply(u_new, lif.v_th, lif.a1)
            u[li], o[li] = u_new, s
            inp = s
        outs.append(inp)
    avg = torch.stack(outs).mean(dim=0)
    if isinstance(target, (int, np.integer)):
        target = np.eye(avg.numel())[int(target)]
    y = torch.tensor(np.asarray(target, dtype=np.float64)).reshape(avg.shape)
    loss = 0.5 * ((y - avg) ** 2).sum()
    loss.backward()
    return (
        {li: w.grad.numpy().copy() for li, w in ws.items()},
        {li: b.grad.numpy().copy() for li, b in bs.items()},
        float(loss.detach()),
    )


# --------------------------------------------------------------------------
# integer reference


def _ref_decay(v, delta):
    s = v * (4096 - delta)
    q = abs(s) // 4096
    return q if s >= 0 else -q


def _ref_conv(spikes, weight, padding):
    # spikes: [IC][IH][IW] nested lists, weight: [OC][IC][k][k]
    ic = len(spikes)
    ih, iw = len(spikes[0]), len(spikes[0][0])
    oc = len(weight)
    k = len(weight[0][0])
    oh, ow = ih + 2 * padding - k + 1, iw + 2 * padding - k + 1
    out = [[[0] * ow for _ in range(oh)] for _ in range(oc)]
    for co in range(oc):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0
                for ci in range(ic):
                    for dy in range(k):
                        iy = oy - padding + dy
                        if not 0 <= iy < ih:
                            continue
                        for dx in range(k):
                            ix = ox - padding + dx
                            if 0 <= ix < iw:
                                acc += weight[co][ci][dy][dx] * spikes[ci][iy][ix]
                out[co][oy][ox] = acc
    return out


def _ref_pool(spikes, k, w_int):
    c = len(spikes)
    ih, iw = len(spikes[0]), len(spikes[0][0])
    oh, ow = -(-ih // k), -(-iw // k)
    out = [[[0] * ow for _ in range(oh)] for _ in range(c)]
    for ci in range(c):
        for iy in range(ih):
            for ix in range(iw):
                out[ci][iy // k][ix // k] += spikes[ci][iy][ix]
    for ci in range(c):
        for oy in range(oh):
            for ox in range(ow):
                out[ci][oy][ox] *= w_int
    return out


def _ref_dense(flat, weight):
    return [sum(weight[j][i] * flat[i] for i in range(len(flat))) for j in range(len(weight))]


def _flatten(nested):
    if isinstance(nested[0], list):
        flat = []
        for part in nested:
            flat.extend(_flatten(part))
        return flat
    return list(nested)


def cuba_reference(qnet, frames_bits, replication, blank):
    """Integer trajectory of the whole network, plain Python arithmetic.

    frames_bits is a list of [2][H][W] nested int lists.  Returns one dict
    per timestep: {"spikes", "comp_v", "comp_i"} with per-layer flat int
    lists, matching the package's cuba_step order of operations.
    """
    shapes = qnet.layer_shapes()
    comp_v = [[0] * int(np.prod(s)) for s in shapes]
    comp_i = [[0] * int(np.prod(s)) for s in shapes]
    steps = []
    for bits in frames_bits:
        c = len(bits)
        h, w = len(bits[0]), len(bits[0][0])
        zero = [[[0] * w for _ in range(h)] for _ in range(c)]
        for step in range(replication + blank):
            inp = bits if step < replication else zero
            rec = {"spikes": [], "comp_v": [], "comp_i": []}
            for li, layer in enumerate(qnet.layers):
                if layer.kind == POOL:
                    drive = _ref_pool(inp, layer.kernel, int(layer.weight))
                elif layer.kind == CONV:
                    drive = _ref_conv(inp, np.asarray(layer.weight).tolist(), layer.padding)
                else:
                    drive = _ref_dense(_flatten(inp), np.asarray(layer.weight).tolist())
                flat_drive = _flatten(drive)
                shift = 6 + layer.wgt_exp
                spikes_flat = []
                for n, d in enumerate(flat_drive):
                    ci = _ref_decay(comp_i[li][n], layer.delta_i) + (d << shift)
                    cv = _ref_decay(comp_v[li][n], layer.delta_v) + ci + layer.bias
                    s = 1 if cv >= (layer.vth_mant << 6) else 0
                    comp_i[li][n] = ci
                    comp_v[li][n] = 0 if s else cv
                    spikes_flat.append(s)
                rec["spikes"].append(spikes_flat)
                rec["comp_v"].append(list(comp_v[li]))
                rec["comp_i"].append(list(comp_i[li]))
                # reshape flat spikes back to the layer's output shape
                shape = shapes[li]
                if len(shape) == 3:
                    cc, hh, ww = shape
                    inp = [
                        [[spikes_flat[ci_ * hh * ww + y * ww + x] for x in range(ww)] for y in range(hh)]
                        for ci_ in range(cc)
                    ]
                else:
                    inp = spikes_flat
            steps.append(rec)
    return steps

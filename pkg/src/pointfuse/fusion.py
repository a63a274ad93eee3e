"""Two-stream point network: set abstraction with positional attention,
cross-modal feature exchange and the voting proposal head.

Both streams (LiDAR points and lifted pseudo points) run the same
encoder/decoder machinery; they only meet inside CrossFusion blocks.
Neighbour selection (sampling, kNN grouping) routes on raw coordinate
values and carries no gradient; everything downstream of the routing,
including the interpolation weights, is differentiable.

Group reductions sort member indices ascending first, so outputs are
bitwise identical under any permutation of a group's members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, normalize_angle
from .geometry import farthest_point_sampling, knn_group
from .nn import LbrLayer, LinearLayer, Mlp, Rng, init_weight
from .tensor import (ShapeError, Tensor, as_tensor, concat, exp, gather_rows, matmul,
                     maxpool_group, narrow, relu, reshape, sigmoid, softmax, transpose,
                     tsum)


class FusionError(ValueError):
    """Inconsistent shapes or modes in the fusion network."""


# -- differentiable inverse-distance interpolation -------------------------------

_EXACT_D2 = 1e-20    # squared distance below this counts as coincident


def idw_interpolate(target_coords, source_coords, source_feats, k: int = 3, p: float = 2.0) -> Tensor:
    """Interpolate source features at target positions, weights 1/d^p over
    the k nearest sources.

    Neighbour choice is routing (no gradient); the weights themselves are
    differentiable in both coordinate sets.  A target sitting exactly on
    a source copies that source's features (smallest index wins), with no
    coordinate gradient for that row.
    """
    tc = as_tensor(target_coords)
    sc = as_tensor(source_coords)
    sf = as_tensor(source_feats)
    n = tc.data.shape[0]
    idx = knn_group(tc.data, sc.data, k)

    diff = gather_rows(sc, idx) - reshape(tc, (n, 1, 3))
    d2 = tsum(diff * diff, axis=2)                       # [n, k]
    exact = d2.data <= _EXACT_D2
    row_exact = exact.any(axis=1)

    # shift coincident entries off zero, then mask their weights away;
    # rows with a coincident source get a constant one-hot instead
    d2_safe = d2 + Tensor(exact.astype(np.float64))
    w = d2_safe ** (-p / 2.0)
    keep = np.broadcast_to(~row_exact[:, None], exact.shape).astype(np.float64)
    onehot = np.zeros(exact.shape)
    rows = np.flatnonzero(row_exact)
    onehot[rows, np.argmax(exact[rows], axis=1)] = 1.0
    w = w * Tensor(keep) + Tensor(onehot)

    num = tsum(reshape(w, (n, k, 1)) * gather_rows(sf, idx), axis=1)
    den = tsum(w, axis=1, keepdims=True)
    return num / den


# -- grouped positional attention -------------------------------------------------


class PointAttention:
    """Per-channel attention over fixed-size neighbour groups.

    Features are re-embedded (LBR then a learned 3C expansion) into
    query/key/value; a positional encoding of coordinate differences is
    added to both the score path and the values.  mode picks how query
    and key meet: "subtract" (q - k + pos) or "multiply" (q * k + pos).
    The block output keeps its input as a residual.
    """

    def __init__(self, rng: Rng, channels: int, mode: str = "subtract",
                 norm_mode: str = "standardize"):
        if mode not in ("subtract", "multiply"):
            raise FusionError(f"unknown attention mode {mode!r}")
        self.channels = channels
        self.mode = mode
        self.qkv_lbr = LbrLayer(rng.derive("qkv_lbr"), channels, channels, norm_mode)
        self.expand = init_weight(rng.derive("expand"), channels, 3 * channels)
        self.pos_mlp = Mlp(rng.derive("pos"), 3, channels, channels)
        self.score_mlp = Mlp(rng.derive("score"), channels, channels, channels)
        self.out_lbr = LbrLayer(rng.derive("out_lbr"), channels, channels, norm_mode)

    def params(self, prefix: str):
        return (self.qkv_lbr.params(prefix + ".qkv_lbr")
                + [(prefix + ".expand", self.expand)]
                + self.pos_mlp.params(prefix + ".pos")
                + self.score_mlp.params(prefix + ".score")
                + self.out_lbr.params(prefix + ".out_lbr"))

    def __call__(self, coords: Tensor, feats: Tensor, groups: np.ndarray) -> Tensor:
        m, c = feats.data.shape
        if c != self.channels:
            raise FusionError(f"attention expects {self.channels} channels, got {c}")
        if groups.shape[0] != m:
            raise FusionError(f"groups rows {groups.shape[0]} != points {m}")
        groups = np.sort(np.asarray(groups), axis=1)    # canonical reduction order
        length = groups.shape[1]

        qkv = matmul(self.qkv_lbr(feats), self.expand)
        q = narrow(qkv, 1, 0, c)
        k = narrow(qkv, 1, c, c)
        v = narrow(qkv, 1, 2 * c, c)

        rel = gather_rows(coords, groups) - reshape(coords, (m, 1, 3))
        pos = self.pos_mlp(rel)                          # [m, L, c]
        kg = gather_rows(k, groups)
        vg = gather_rows(v, groups)
        qe = reshape(q, (m, 1, c))
        pre = qe * kg + pos if self.mode == "multiply" else qe - kg + pos
        attn = softmax(self.score_mlp(pre), axis=1)
        pooled = tsum(attn * (vg + pos), axis=1)
        return self.out_lbr(pooled) + feats


# -- encoder / decoder blocks -----------------------------------------------------


class TransitionDown:
    """Downsample a point set and widen its features.

    Farthest-point sampling picks the survivors; each keeps the max over
    an LBR embedding of its k nearest originals, then attends within its
    neighbourhood among the survivors.
    """

    def __init__(self, rng: Rng, c_in: int, c_out: int, m_out: int, l_group: int,
                 mode: str = "subtract", norm_mode: str = "standardize"):
        self.c_in = c_in
        self.m_out = m_out
        self.l_group = l_group
        self.local_lbr = LbrLayer(rng.derive("local"), c_in, c_out, norm_mode)
        self.attention = PointAttention(rng.derive("attn"), c_out, mode, norm_mode)

    def params(self, prefix: str):
        return self.local_lbr.params(prefix + ".local") + self.attention.params(prefix + ".attn")

    def __call__(self, coords: Tensor, feats: Tensor):
        n = coords.data.shape[0]
        if feats.data.shape != (n, self.c_in):
            raise FusionError(f"expected feats [{n}, {self.c_in}], got {feats.data.shape}")
        if not self.l_group <= self.m_out < n:
            raise FusionError(f"need l_group <= m_out < N, got {self.l_group}, {self.m_out}, {n}")
        centers = farthest_point_sampling(coords.data, self.m_out)
        neigh = knn_group(coords.data[centers], coords.data, self.l_group)
        neigh = np.sort(neigh, axis=1)
        local = maxpool_group(self.local_lbr(gather_rows(feats, neigh)))
        down_coords = gather_rows(coords, centers)
        groups = knn_group(down_coords.data, down_coords.data, self.l_group)
        out = self.attention(down_coords, local, groups)
        return down_coords, out, centers


class TransitionUp:
    """Carry decoder features up to a skip level.

    Coarse features are distance-interpolated at the skip positions,
    merged with an LBR embedding of the skip features, then refined by
    attention at the skip resolution.  Width stays at the coarse width.
    """

    def __init__(self, rng: Rng, c_coarse: int, c_skip: int, l_group: int,
                 mode: str = "subtract", norm_mode: str = "standardize"):
        self.c_coarse = c_coarse
        self.c_skip = c_skip
        self.l_group = l_group
        self.skip_lbr = LbrLayer(rng.derive("skip"), c_skip, c_coarse, norm_mode)
        self.attention = PointAttention(rng.derive("attn"), c_coarse, mode, norm_mode)

    def params(self, prefix: str):
        return self.skip_lbr.params(prefix + ".skip") + self.attention.params(prefix + ".attn")

    def __call__(self, coarse_coords: Tensor, coarse_feats: Tensor,
                 skip_coords: Tensor, skip_feats: Tensor) -> Tensor:
        if coarse_feats.data.shape[1] != self.c_coarse or skip_feats.data.shape[1] != self.c_skip:
            raise FusionError("transition-up channel mismatch")
        merged = idw_interpolate(skip_coords, coarse_coords, coarse_feats) + self.skip_lbr(skip_feats)
        groups = knn_group(skip_coords.data, skip_coords.data, self.l_group)
        return self.attention(skip_coords, merged, groups)


class FeatureProp:
    """Plain interpolation decoder step: upsample, concat skip, LBR stack."""

    def __init__(self, rng: Rng, c_coarse: int, c_skip: int, c_out: int,
                 norm_mode: str = "standardize"):
        self.c_coarse = c_coarse
        self.c_skip = c_skip
        self.lbr1 = LbrLayer(rng.derive("lbr1"), c_coarse + c_skip, c_out, norm_mode)
        self.lbr2 = LbrLayer(rng.derive("lbr2"), c_out, c_out, norm_mode)

    def params(self, prefix: str):
        return self.lbr1.params(prefix + ".lbr1") + self.lbr2.params(prefix + ".lbr2")

    def __call__(self, coarse_coords: Tensor, coarse_feats: Tensor,
                 skip_coords: Tensor, skip_feats: Tensor) -> Tensor:
        if coarse_feats.data.shape[1] != self.c_coarse or skip_feats.data.shape[1] != self.c_skip:
            raise FusionError("feature-prop channel mismatch")
        upsampled = idw_interpolate(skip_coords, coarse_coords, coarse_feats)
        return self.lbr2(self.lbr1(concat([upsampled, skip_feats], axis=1)))


# -- cross-modal fusion -----------------------------------------------------------


class CrossFusion:
    """Bidirectional feature exchange between the two streams.

    Each side queries the other: attention rows mix the other side's
    values, a learned mixer reshapes the raw score matrix first, and the
    attended summary is combined with the side's own projection
    (subtract / add / concat) before a final LBR.  Both directions run
    the exact same code path with arguments swapped, so mirrored
    parameters give bitwise-mirrored outputs.
    """

    def __init__(self, rng: Rng, c_raw: int, c_pseudo: int, c_embed: int,
                 n_raw: int, n_pseudo: int, combine: str = "subtract",
                 mode: str = "multiply", norm_mode: str = "standardize"):
        if combine not in ("subtract", "add", "concat"):
            raise FusionError(f"unknown combine mode {combine!r}")
        if mode not in ("subtract", "multiply"):
            raise FusionError(f"unknown attention mode {mode!r}")
        self.c_embed = c_embed
        self.n_raw = n_raw
        self.n_pseudo = n_pseudo
        self.combine = combine
        self.mode = mode
        merged = 2 * c_embed if combine == "concat" else c_embed
        self.w_raw = init_weight(rng.derive("w_raw"), c_raw, 3 * c_embed)
        self.w_pseudo = init_weight(rng.derive("w_pseudo"), c_pseudo, 3 * c_embed)
        self.proj_raw = LinearLayer(rng.derive("proj_raw"), c_raw, c_embed)
        self.proj_pseudo = LinearLayer(rng.derive("proj_pseudo"), c_pseudo, c_embed)
        self.mix_raw = Mlp(rng.derive("mix_raw"), n_pseudo, n_pseudo, n_pseudo)
        self.mix_pseudo = Mlp(rng.derive("mix_pseudo"), n_raw, n_raw, n_raw)
        self.out_raw = LbrLayer(rng.derive("out_raw"), merged, c_embed, norm_mode)
        self.out_pseudo = LbrLayer(rng.derive("out_pseudo"), merged, c_embed, norm_mode)

    def params(self, prefix: str):
        return ([(prefix + ".w_raw", self.w_raw), (prefix + ".w_pseudo", self.w_pseudo)]
                + self.proj_raw.params(prefix + ".proj_raw")
                + self.proj_pseudo.params(prefix + ".proj_pseudo")
                + self.mix_raw.params(prefix + ".mix_raw")
                + self.mix_pseudo.params(prefix + ".mix_pseudo")
                + self.out_raw.params(prefix + ".out_raw")
                + self.out_pseudo.params(prefix + ".out_pseudo"))

    def _enhance(self, f_self, w_self, proj_self, mix_self, out_self, f_other, w_other):
        c = self.c_embed
        k_self = narrow(matmul(f_self, w_self), 1, c, c)
        qkv_other = matmul(f_other, w_other)
        q_other = narrow(qkv_other, 1, 0, c)
        v_other = narrow(qkv_other, 1, 2 * c, c)
        if self.mode == "multiply":
            scores = matmul(k_self, transpose(q_other, (1, 0)))
        else:
            scores = tsum(k_self, axis=1, keepdims=True) - reshape(tsum(q_other, axis=1), (1, -1))
        attn = softmax(mix_self(scores), axis=1)
        attended = matmul(attn, v_other)
        base = proj_self(f_self)
        if self.combine == "subtract":
            merged = base - attended
        elif self.combine == "add":
            merged = base + attended
        else:
            merged = concat([base, attended], axis=1)
        return out_self(merged), attn

    def __call__(self, f_raw: Tensor, f_pseudo: Tensor):
        if f_raw.data.shape[0] != self.n_raw or f_pseudo.data.shape[0] != self.n_pseudo:
            raise FusionError(
                f"fusion sized for {self.n_raw}/{self.n_pseudo} points, "
                f"got {f_raw.data.shape[0]}/{f_pseudo.data.shape[0]}")
        enh_raw, a_raw = self._enhance(f_raw, self.w_raw, self.proj_raw, self.mix_raw,
                                       self.out_raw, f_pseudo, self.w_pseudo)
        enh_pseudo, a_pseudo = self._enhance(f_pseudo, self.w_pseudo, self.proj_pseudo,
                                             self.mix_pseudo, self.out_pseudo, f_raw, self.w_raw)
        return enh_raw, enh_pseudo, {"attn_raw": a_raw.data, "attn_pseudo": a_pseudo.data}


# -- the full two-stream backbone ---------------------------------------------------


class TwoStreamNetwork:
    """Lockstep encoders over both point sets, optional per-stage fusion
    links, mirrored decoders and an optional final fusion.

    The raw stream decodes through attention transitions, the pseudo
    stream through plain feature propagation.  Output width is the last
    stage width for both streams regardless of which links are enabled.
    """

    def __init__(self, cfg, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        sc = cfg.stage_channels
        nm = cfg.norm_mode
        self.raw_down = []
        self.pseudo_down = []
        self.links = []
        c_raw, c_pseudo = cfg.raw_in_channels, cfg.feature_channels
        for k in range(len(sc)):
            self.raw_down.append(TransitionDown(
                rng.derive(f"raw_down{k}"), c_raw, sc[k], cfg.raw_stages[k],
                cfg.l_group, cfg.attn_down, nm))
            self.pseudo_down.append(TransitionDown(
                rng.derive(f"pseudo_down{k}"), c_pseudo, sc[k], cfg.pseudo_stages[k],
                cfg.l_group, cfg.attn_down, nm))
            if cfg.pft_enabled:
                self.links.append(CrossFusion(
                    rng.derive(f"link{k}"), sc[k], sc[k], sc[k],
                    cfg.raw_stages[k], cfg.pseudo_stages[k],
                    cfg.combine_mode, cfg.attn_fusion, nm))
            else:
                self.links.append(None)
            c_raw = c_pseudo = sc[k]

        width = sc[-1]
        raw_skips = [cfg.raw_in_channels] + list(sc[:-1])
        pseudo_skips = [cfg.feature_channels] + list(sc[:-1])
        self.raw_up = []
        self.pseudo_up = []
        for i in range(len(sc)):
            c_coarse = sc[-1] if i == 0 else width
            self.raw_up.append(TransitionUp(
                rng.derive(f"raw_up{i}"), c_coarse, raw_skips[-1 - i],
                cfg.l_group, cfg.attn_up, nm))
            self.pseudo_up.append(FeatureProp(
                rng.derive(f"pseudo_up{i}"), c_coarse, pseudo_skips[-1 - i], width, nm))
        self.final_link = None
        if cfg.pft_final:
            self.final_link = CrossFusion(
                rng.derive("final_link"), width, width, width,
                cfg.n_raw, cfg.n_pseudo, cfg.combine_mode, cfg.attn_fusion, nm)
        self.width = width

    def params(self, prefix: str = "net"):
        out = []
        for k, (rd, pd, ln) in enumerate(zip(self.raw_down, self.pseudo_down, self.links)):
            out += rd.params(f"{prefix}.raw_down{k}") + pd.params(f"{prefix}.pseudo_down{k}")
            if ln is not None:
                out += ln.params(f"{prefix}.link{k}")
        for i, (ru, pu) in enumerate(zip(self.raw_up, self.pseudo_up)):
            out += ru.params(f"{prefix}.raw_up{i}") + pu.params(f"{prefix}.pseudo_up{i}")
        if self.final_link is not None:
            out += self.final_link.params(f"{prefix}.final_link")
        return out

    def __call__(self, raw_coords, raw_feats, pseudo_coords, pseudo_feats):
        cfg = self.cfg
        rc, rf = as_tensor(raw_coords), as_tensor(raw_feats)
        pc, pf = as_tensor(pseudo_coords), as_tensor(pseudo_feats)
        if rf.data.shape != (cfg.n_raw, cfg.raw_in_channels):
            raise FusionError(f"raw stream expects [{cfg.n_raw}, {cfg.raw_in_channels}], got {rf.data.shape}")
        if pf.data.shape != (cfg.n_pseudo, cfg.feature_channels):
            raise FusionError(f"pseudo stream expects [{cfg.n_pseudo}, {cfg.feature_channels}], got {pf.data.shape}")

        aux = {"links": []}
        r_skips = [(rc, rf)]
        p_skips = [(pc, pf)]
        for k in range(len(cfg.stage_channels)):
            rc, rf, _ = self.raw_down[k](rc, rf)
            pc, pf, _ = self.pseudo_down[k](pc, pf)
            if self.links[k] is not None:
                rf, pf, info = self.links[k](rf, pf)
                aux["links"].append(info)
            r_skips.append((rc, rf))
            p_skips.append((pc, pf))

        rc, rf = r_skips[-1]
        pc, pf = p_skips[-1]
        for i in range(len(self.raw_up)):
            sc_r, sf_r = r_skips[-2 - i]
            rf = self.raw_up[i](rc, rf, sc_r, sf_r)
            rc = sc_r
            sc_p, sf_p = p_skips[-2 - i]
            pf = self.pseudo_up[i](pc, pf, sc_p, sf_p)
            pc = sc_p

        if self.final_link is not None:
            rf, pf, info = self.final_link(rf, pf)
            aux["final"] = info
        return rf, pf, aux


# -- proposal head --------------------------------------------------------------


@dataclass
class RpnOutput:
    votes: Tensor       # [N, 3] shifted coordinates, gradients intact
    cls_prob: Tensor    # [N, K] per-class sigmoid scores
    reg: Tensor         # [N, 8] box residuals


@dataclass
class ProposalSet:
    boxes: list         # Box3D, decoded
    scores: np.ndarray  # [P]
    classes: list       # class names, len P
    indices: np.ndarray # [P] row in the head input each proposal came from


def encode_box(gt: Box3D, vote: np.ndarray, anchor) -> np.ndarray:
    """Residual target for a box against a vote position and class anchor.

    Offsets are scaled by the anchor's ground diagonal (height for z),
    sizes are log ratios and yaw is its (sin, cos) pair.
    """
    al, aw, ah = anchor
    diag = float(np.hypot(al, aw))
    t = np.empty(8)
    t[0] = (gt.x - vote[0]) / diag
    t[1] = (gt.y - vote[1]) / diag
    t[2] = (gt.z - vote[2]) / ah
    t[3] = np.log(gt.l / al)
    t[4] = np.log(gt.w / aw)
    t[5] = np.log(gt.h / ah)
    t[6] = np.sin(gt.yaw)
    t[7] = np.cos(gt.yaw)
    return t


def decode_box(res: np.ndarray, vote: np.ndarray, anchor) -> Box3D:
    al, aw, ah = anchor
    diag = float(np.hypot(al, aw))
    x = vote[0] + res[0] * diag
    y = vote[1] + res[1] * diag
    z = vote[2] + res[2] * ah
    yaw = normalize_angle(float(np.arctan2(res[6], res[7])))
    return Box3D(float(x), float(y), float(z),
                 float(al * np.exp(res[3])), float(aw * np.exp(res[4])),
                 float(ah * np.exp(res[5])), yaw)


class ProposalHead:
    """Vote-then-classify detection head.

    Each point votes a center offset; class scores and box residuals are
    read from the vote position concatenated with the point's features.
    """

    def __init__(self, rng: Rng, c_in: int, classes, anchors: dict,
                 vote_hidden: int = 64, head_hidden: int = 64):
        self.c_in = c_in
        self.classes = tuple(classes)
        self.anchors = dict(anchors)
        self.vote_mlp = Mlp(rng.derive("vote"), c_in, vote_hidden, 3)
        self.cls_mlp = Mlp(rng.derive("cls"), c_in + 3, head_hidden, len(self.classes))
        self.reg_mlp = Mlp(rng.derive("reg"), c_in + 3, head_hidden, 8)

    def params(self, prefix: str = "head"):
        return (self.vote_mlp.params(prefix + ".vote")
                + self.cls_mlp.params(prefix + ".cls")
                + self.reg_mlp.params(prefix + ".reg"))

    def __call__(self, coords, feats) -> RpnOutput:
        coords = as_tensor(coords)
        feats = as_tensor(feats)
        if feats.data.shape[1] != self.c_in:
            raise FusionError(f"head expects {self.c_in} channels, got {feats.data.shape[1]}")
        votes = coords + self.vote_mlp(feats)
        joint = concat([votes, feats], axis=1)
        cls_prob = sigmoid(self.cls_mlp(joint))
        reg = self.reg_mlp(joint)
        return RpnOutput(votes, cls_prob, reg)

    def decode_proposals(self, out: RpnOutput, score_threshold: float) -> ProposalSet:
        """Threshold by best class score and decode boxes (no gradients)."""
        probs = out.cls_prob.data
        votes = out.votes.data
        reg = out.reg.data
        best = np.argmax(probs, axis=1)
        score = probs[np.arange(len(probs)), best]
        keep = np.flatnonzero(score >= score_threshold)
        boxes, names = [], []
        for i in keep:
            klass = self.classes[best[i]]
            boxes.append(decode_box(reg[i], votes[i], self.anchors[klass]))
            names.append(klass)
        return ProposalSet(boxes, score[keep], names, keep)

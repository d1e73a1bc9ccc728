"""Compiled inner loops: connectivity, evaluation and the GOM pass.

Genotypes are evaluated by first compiling the reachable part of the
multi-tree into a register program (calls expanded per call site, argument
subtrees computed once per call) and then running that program column-wise
over the data rows.  All evaluation in the package goes through ``run_program``
so that different routes to the same expression agree bit for bit.
"""
import numpy as np
from numba import njit

ADD, SUB, MUL, DIV, SIN, COS, LOG, SQRT, FEAT, COEF, CALL, ARG = range(12)


@njit(cache=True)
def structure(kinds, args, depth, depths):
    """Active-node mask and, per tree, which argument slots it reads."""
    n, size = kinds.shape
    local = np.zeros((n, size), dtype=np.bool_)
    uses = np.zeros((n, 2), dtype=np.bool_)
    calls = np.zeros((n, n), dtype=np.int64)
    stack = np.empty(size, dtype=np.int64)
    for t in range(n):
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            i = stack[sp]
            local[t, i] = True
            k = kinds[t, i]
            if depths[i] == depth or (k >= FEAT and k != CALL):
                if k == ARG:
                    uses[t, args[t, i]] = True
                continue
            right = i + (1 << (depth - depths[i]))
            if k < SIN:
                stack[sp] = right
                stack[sp + 1] = i + 1
                sp += 2
            elif k < FEAT:
                stack[sp] = i + 1
                sp += 1
            else:
                m = args[t, i]
                calls[t, m] += 1
                if uses[m, 1]:
                    stack[sp] = right
                    sp += 1
                if uses[m, 0]:
                    stack[sp] = i + 1
                    sp += 1
    active = np.zeros(n, dtype=np.bool_)
    active[n - 1] = True
    for t in range(n - 1, -1, -1):
        if active[t]:
            for m in range(t):
                if calls[t, m] > 0:
                    active[m] = True
    for t in range(n):
        if not active[t]:
            local[t, :] = False
    return local, uses


@njit(cache=True)
def _compile_into(kinds, args, values, depth, depths, uses, p_op, p_a, p_b, p_v):
    """Fill the program arrays; returns (instruction count, output register),
    or (-1, -1) if the arrays are too small."""
    n = kinds.shape[0]
    cap = p_op.shape[0]
    n_stack = n * (depth + 2) + 2
    st_t = np.empty(n_stack, dtype=np.int64)
    st_i = np.empty(n_stack, dtype=np.int64)
    st_a0 = np.empty(n_stack, dtype=np.int64)
    st_a1 = np.empty(n_stack, dtype=np.int64)
    st_ph = np.empty(n_stack, dtype=np.int64)
    st_left = np.empty(n_stack, dtype=np.int64)
    memo = np.full(n, -1, dtype=np.int64)

    st_t[0], st_i[0], st_a0[0], st_a1[0], st_ph[0] = n - 1, 0, -1, -1, 0
    sp = 1
    count = 0
    ret = -1
    while sp > 0:
        f = sp - 1
        t = st_t[f]
        i = st_i[f]
        ph = st_ph[f]
        k = kinds[t, i]
        if ph == 0:
            if k == FEAT or k == COEF:
                if count >= cap:
                    return -1, -1
                p_op[count] = k
                p_a[count] = args[t, i]
                p_v[count] = values[t, i]
                ret = count
                count += 1
                sp -= 1
                continue
            if k == ARG:
                ret = st_a0[f] if args[t, i] == 0 else st_a1[f]
                sp -= 1
                continue
            if k == CALL:
                m = args[t, i]
                if (not uses[m, 0]) and (not uses[m, 1]) and memo[m] >= 0:
                    ret = memo[m]
                    sp -= 1
                    continue
                st_ph[f] = 1
                if uses[m, 0]:
                    st_t[sp], st_i[sp], st_a0[sp], st_a1[sp], st_ph[sp] = t, i + 1, st_a0[f], st_a1[f], 0
                    sp += 1
                else:
                    ret = -1
                continue
            st_ph[f] = 1
            st_t[sp], st_i[sp], st_a0[sp], st_a1[sp], st_ph[sp] = t, i + 1, st_a0[f], st_a1[f], 0
            sp += 1
            continue
        right = i + (1 << (depth - depths[i]))
        if ph == 1:
            st_left[f] = ret
            if k < SIN:
                st_ph[f] = 2
                st_t[sp], st_i[sp], st_a0[sp], st_a1[sp], st_ph[sp] = t, right, st_a0[f], st_a1[f], 0
                sp += 1
                continue
            if k < FEAT:
                if count >= cap:
                    return -1, -1
                p_op[count] = k
                p_a[count] = ret
                ret = count
                count += 1
                sp -= 1
                continue
            m = args[t, i]
            st_ph[f] = 2
            if uses[m, 1]:
                st_t[sp], st_i[sp], st_a0[sp], st_a1[sp], st_ph[sp] = t, right, st_a0[f], st_a1[f], 0
                sp += 1
            else:
                ret = -1
            continue
        if ph == 2:
            if k < SIN:
                if count >= cap:
                    return -1, -1
                p_op[count] = k
                p_a[count] = st_left[f]
                p_b[count] = ret
                ret = count
                count += 1
                sp -= 1
                continue
            m = args[t, i]
            st_ph[f] = 3
            st_t[sp], st_i[sp], st_a0[sp], st_a1[sp], st_ph[sp] = m, 0, st_left[f], ret, 0
            sp += 1
            continue
        # ph == 3: returning from a call
        m = args[t, i]
        if (not uses[m, 0]) and (not uses[m, 1]):
            memo[m] = ret
        sp -= 1
    return count, ret


@njit(cache=True)
def compile_program(kinds, args, values, depth, depths, uses):
    cap = 64
    while True:
        p_op = np.empty(cap, dtype=np.int64)
        p_a = np.zeros(cap, dtype=np.int64)
        p_b = np.zeros(cap, dtype=np.int64)
        p_v = np.zeros(cap, dtype=np.float64)
        count, out = _compile_into(kinds, args, values, depth, depths, uses, p_op, p_a, p_b, p_v)
        if count >= 0:
            return p_op[:count], p_a[:count], p_b[:count], p_v[:count], out
        cap *= 4


# Vectorizable sine/cosine: three-part Cody-Waite reduction by pi/2 followed
# by the classic minimax kernels on [-pi/4, pi/4].  Within 2 ulp of libm for
# |x| <= 1e6; larger or non-finite inputs fall back to libm.
_INV_PIO2 = 6.36619772367581382433e-01
_PIO2_1 = 1.57079632673412561417e+00
_PIO2_2 = 6.07710050630396597660e-11
_PIO2_3 = 2.02226624871116645580e-21
_REDUCTION_LIMIT = 1e6


@njit(cache=True, error_model="numpy")
def sincos_into(src, dst, quarter_turns):
    """``dst = sin(src)`` for ``quarter_turns = 0`` and ``cos(src)`` for 1."""
    for r in range(src.shape[0]):
        v = src[r]
        n = np.rint(v * _INV_PIO2)
        x = v - n * _PIO2_1
        x = x - n * _PIO2_2
        x = x - n * _PIO2_3
        z = x * x
        s = x + x * z * (-1.66666666666666324348e-01 + z * (8.33333333332248946124e-03 + z * (
            -1.98412698298579493134e-04 + z * (2.75573137070700676789e-06 + z * (
                -2.50507602534068634195e-08 + z * 1.58969099521155010221e-10)))))
        c = 1.0 - 0.5 * z + z * z * (4.16666666666666019037e-02 + z * (
            -1.38888888888741095749e-03 + z * (2.48015872894767294178e-05 + z * (
                -2.75573143513906633035e-07 + z * (2.08757232129817482790e-09
                                                   + z * -1.13596475577881948265e-11)))))
        q = n + quarter_turns
        m = q - 4.0 * np.floor(q * 0.25)
        dst[r] = s if m == 0.0 else (c if m == 1.0 else (-s if m == 2.0 else -c))
    for r in range(src.shape[0]):
        if not abs(src[r]) <= _REDUCTION_LIMIT:
            dst[r] = np.sin(src[r]) if quarter_turns == 0.0 else np.cos(src[r])


@njit(cache=True, error_model="numpy")
def run_program(p_op, p_a, p_b, p_v, out, cols):
    rows = cols.shape[1]
    count = p_op.shape[0]
    reg = np.empty((count, rows))
    for j in range(count):
        op = p_op[j]
        a = p_a[j]
        b = p_b[j]
        if op == FEAT:
            for r in range(rows):
                reg[j, r] = cols[a, r]
        elif op == COEF:
            c = p_v[j]
            for r in range(rows):
                reg[j, r] = c
        elif op == ADD:
            for r in range(rows):
                reg[j, r] = reg[a, r] + reg[b, r]
        elif op == SUB:
            for r in range(rows):
                reg[j, r] = reg[a, r] - reg[b, r]
        elif op == MUL:
            for r in range(rows):
                reg[j, r] = reg[a, r] * reg[b, r]
        elif op == DIV:
            for r in range(rows):
                reg[j, r] = reg[a, r] / reg[b, r]
        elif op == SIN:
            sincos_into(reg[a], reg[j], 0.0)
        elif op == COS:
            sincos_into(reg[a], reg[j], 1.0)
        elif op == LOG:
            for r in range(rows):
                reg[j, r] = np.log(np.abs(reg[a, r]))
        else:
            for r in range(rows):
                reg[j, r] = np.sqrt(np.abs(reg[a, r]))
    return reg[out].copy()


@njit(cache=True)
def evaluate(kinds, args, values, depth, depths, cols):
    _, uses = structure(kinds, args, depth, depths)
    p_op, p_a, p_b, p_v, out = compile_program(kinds, args, values, depth, depths, uses)
    return run_program(p_op, p_a, p_b, p_v, out, cols)


@njit(cache=True, error_model="numpy")
def score(pred, y, scaling):
    """Mean squared error with optional linear scaling.

    Returns (mse, intercept, slope); any non-finite prediction gives +inf.
    """
    n = pred.shape[0]
    for r in range(n):
        if not np.isfinite(pred[r]):
            return np.inf, 0.0, 1.0
    a = 0.0
    b = 1.0
    if scaling:
        pm = 0.0
        ym = 0.0
        for r in range(n):
            pm += pred[r]
            ym += y[r]
        pm /= n
        ym /= n
        var = 0.0
        cov = 0.0
        for r in range(n):
            dp = pred[r] - pm
            var += dp * dp
            cov += dp * (y[r] - ym)
        if var == 0.0 or not np.isfinite(var):
            a, b = ym, 0.0
        else:
            b = cov / var
            a = ym - b * pm
    s = 0.0
    for r in range(n):
        d = y[r] - (a + b * pred[r])
        s += d * d
    mse = s / n
    if not np.isfinite(mse):
        return np.inf, a, b
    return mse, a, b


@njit(cache=True)
def _error(kinds, args, values, depth, depths, uses, cols, y, scaling):
    p_op, p_a, p_b, p_v, out = compile_program(kinds, args, values, depth, depths, uses)
    return score(run_program(p_op, p_a, p_b, p_v, out, cols), y, scaling)


@njit(cache=True)
def _snapshot(kinds, args, values, err, a, b, snap_k, snap_a, snap_v, snap_f, stats):
    s = stats[5]
    if s < snap_k.shape[0]:
        snap_k[s] = kinds
        snap_a[s] = args
        snap_v[s] = values
        snap_f[s, 0] = err
        snap_f[s, 1] = a
        snap_f[s, 2] = b
        stats[5] = s + 1


@njit(cache=True)
def _mutate_coefficients(kinds, args, values, mask, uses, depth, depths, cols, y, scaling,
                         fit, step, rate, snap_k, snap_a, snap_v, snap_f, stats):
    n, size = kinds.shape
    n_coef = 0
    live = False
    for t in range(n):
        for i in range(size):
            if kinds[t, i] == COEF:
                n_coef += 1
                if mask[t, i]:
                    live = True
    old = np.empty(n_coef)
    where = np.empty(n_coef, dtype=np.int64)
    c = 0
    for t in range(n):
        for i in range(size):
            if kinds[t, i] == COEF:
                if rate >= 1.0 or np.random.random() < rate:
                    old[c] = values[t, i]
                    where[c] = t * size + i
                    z = np.random.standard_normal()
                    v = values[t, i]
                    if abs(v) < 1e-10:
                        values[t, i] = v + step * z
                    else:
                        values[t, i] = v * (1.0 + step * z)
                    c += 1
    if c == 0 or not live:
        return  # only intron coefficients moved: kept without evaluation
    err, a, b = _error(kinds, args, values, depth, depths, uses, cols, y, scaling)
    stats[4] += 1
    if err < fit[0]:
        fit[0], fit[1], fit[2] = err, a, b
        _snapshot(kinds, args, values, err, a, b, snap_k, snap_a, snap_v, snap_f, stats)
    else:
        for q in range(c):
            values[where[q] // size, where[q] % size] = old[q]


@njit(cache=True)
def gom_pass(kinds, args, values, fit, pop_k, pop_a, pop_v, fos_tree, fos_start, fos_loci,
             order, donors, cols, y, depth, depths, scaling, mutate, per_pass, step, rate,
             seed, snap_k, snap_a, snap_v, snap_f, trace, stats):
    """Gene-pool optimal mixing of one offspring, in place.

    ``fit`` holds (batch error, intercept, slope) and is updated in place.
    ``stats`` counts: evaluated, accepted, identical, intron-only swaps,
    coefficient evaluations, snapshots, trace rows.  A snapshot is stored
    after every strict improvement so the caller can offer it to the archive.
    """
    np.random.seed(seed)
    mask, uses = structure(kinds, args, depth, depths)
    size = kinds.shape[1]
    old_k = np.empty(size, dtype=kinds.dtype)
    old_a = np.empty(size, dtype=args.dtype)
    old_v = np.empty(size)
    for step_i in range(order.shape[0]):
        e = order[step_i]
        d = donors[step_i]
        t = fos_tree[e]
        s0 = fos_start[e]
        s1 = fos_start[e + 1]
        changed = False
        live = False
        for q in range(s0, s1):
            i = fos_loci[q]
            dk = pop_k[d, t, i]
            ok = kinds[t, i]
            diff = False
            if dk != ok:
                diff = True
            elif ok == COEF:
                diff = pop_v[d, t, i] != values[t, i]
            else:
                diff = pop_a[d, t, i] != args[t, i]
            if diff:
                changed = True
                if mask[t, i]:
                    live = True
        if not changed:
            for q in range(s0, s1):
                i = fos_loci[q]
                args[t, i] = pop_a[d, t, i]
            stats[2] += 1
            continue
        for q in range(s0, s1):
            i = fos_loci[q]
            old_k[q - s0] = kinds[t, i]
            old_a[q - s0] = args[t, i]
            old_v[q - s0] = values[t, i]
            kinds[t, i] = pop_k[d, t, i]
            args[t, i] = pop_a[d, t, i]
            values[t, i] = pop_v[d, t, i]
        if not live:
            stats[3] += 1
            continue
        new_mask, new_uses = structure(kinds, args, depth, depths)
        err, a, b = _error(kinds, args, values, depth, depths, new_uses, cols, y, scaling)
        stats[0] += 1
        accept = err <= fit[0]
        r = stats[6]
        if r < trace.shape[0]:
            trace[r, 0] = fit[0]
            trace[r, 1] = err
            trace[r, 2] = 1.0 if accept else 0.0
            stats[6] = r + 1
        if accept:
            stats[1] += 1
            improved = err < fit[0]
            fit[0], fit[1], fit[2] = err, a, b
            mask = new_mask
            uses = new_uses
            if improved:
                _snapshot(kinds, args, values, err, a, b, snap_k, snap_a, snap_v, snap_f, stats)
        else:
            for q in range(s0, s1):
                i = fos_loci[q]
                kinds[t, i] = old_k[q - s0]
                args[t, i] = old_a[q - s0]
                values[t, i] = old_v[q - s0]
        if mutate and not per_pass:
            _mutate_coefficients(kinds, args, values, mask, uses, depth, depths, cols, y,
                                 scaling, fit, step, rate, snap_k, snap_a, snap_v, snap_f, stats)
    if mutate and per_pass:
        _mutate_coefficients(kinds, args, values, mask, uses, depth, depths, cols, y,
                             scaling, fit, step, rate, snap_k, snap_a, snap_v, snap_f, stats)


@njit(cache=True)
def coefficient_mutation(kinds, args, values, fit, depth, depths, cols, y, scaling, step,
                         rate, seed, snap_k, snap_a, snap_v, snap_f, stats):
    np.random.seed(seed)
    mask, uses = structure(kinds, args, depth, depths)
    _mutate_coefficients(kinds, args, values, mask, uses, depth, depths, cols, y, scaling,
                         fit, step, rate, snap_k, snap_a, snap_v, snap_f, stats)

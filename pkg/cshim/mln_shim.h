/* mln_shim.h - runtime support for natively compiled MiniLisp units.
 *
 * A value is one 64-bit machine word.  The low three bits select the
 * representation; heap-backed values (cons, float, string) are opaque
 * handles owned by the host runtime, which also fills the entry table
 * and the relocation pointers before any unit code runs.  This header is
 * consumed verbatim by every emitted unit and its bytes take part in the
 * unit ABI hash: units and runtime cannot disagree about the layout.
 */
#ifndef MLN_SHIM_H
#define MLN_SHIM_H

#include <stdbool.h>
#include <stdint.h>

typedef uint64_t MLValue;

#define MLN_TAG_BITS 3
#define MLN_TAG_MASK ((MLValue)7)
#define MLN_TAG_SPECIAL 0   /* nil and t immediates */
#define MLN_TAG_FIXNUM 1
#define MLN_TAG_SYMBOL 2
#define MLN_TAG_CONS 3
#define MLN_TAG_FLOAT 4
#define MLN_TAG_STRING 5

/* nil is the all-zero word; t is special immediate number one. */
#define MLN_NIL ((MLValue)0)
#define MLN_T (((MLValue)1 << MLN_TAG_BITS) | MLN_TAG_SPECIAL)

#define MLN_FIXNUM_MAX ((int64_t)1152921504606846975LL)   /* 2^60 - 1 */
#define MLN_FIXNUM_MIN ((int64_t)-1152921504606846976LL)  /* -2^60 */

/* error codes understood by the host signal entry */
#define MLN_SIG_WRONG_TYPE_CONS 1
#define MLN_SIG_WRONG_TYPE_NUMBER 2
#define MLN_SIG_OVERFLOW 3
#define MLN_SIG_DIV_BY_ZERO 4

static inline bool mln_fixnum_p(MLValue v) {
  return (v & MLN_TAG_MASK) == MLN_TAG_FIXNUM;
}

static inline bool mln_cons_p(MLValue v) {
  return (v & MLN_TAG_MASK) == MLN_TAG_CONS;
}

static inline int64_t mln_xfixnum(MLValue v) {
  return (int64_t)v >> MLN_TAG_BITS;
}

static inline MLValue mln_make_fixnum(int64_t n) {
  return ((uint64_t)n << MLN_TAG_BITS) | MLN_TAG_FIXNUM;
}

/* Host primitive entries come in the two calling styles of the runtime:
 * fixed argument lists for known arity <= 8, or a count plus an argument
 * vector ("spread") otherwise.  Field order is the primitive registry
 * order and is frozen by the ABI hash. */
typedef MLValue (*mln_spread_fn)(int64_t n, MLValue *args);

struct mln_freloc_table {
  MLValue (*R636172_car)(MLValue);
  MLValue (*R636472_cdr)(MLValue);
  MLValue (*R636f6e73_cons)(MLValue, MLValue);
  MLValue (*R736574636172_setcar)(MLValue, MLValue);
  MLValue (*R736574636472_setcdr)(MLValue, MLValue);
  MLValue (*R6571_eq)(MLValue, MLValue);
  MLValue (*R6e6f74_not)(MLValue);
  MLValue (*R6e756c6c_null)(MLValue);
  MLValue (*R636f6e7370_consp)(MLValue);
  MLValue (*R6669786e756d70_fixnump)(MLValue);
  mln_spread_fn R2b_;                               /* +  */
  mln_spread_fn R2d__;                              /* -  */
  mln_spread_fn R2a_;                               /* *  */
  mln_spread_fn R2f_;                               /* /  */
  MLValue (*R312b_1)(MLValue);                      /* 1+ */
  MLValue (*R312d_1_)(MLValue);                     /* 1- */
  MLValue (*R3c_)(MLValue, MLValue);                /* <  */
  MLValue (*R3e_)(MLValue, MLValue);                /* >  */
  MLValue (*R3c3d_)(MLValue, MLValue);              /* <= */
  MLValue (*R3e3d_)(MLValue, MLValue);              /* >= */
  MLValue (*R3d_)(MLValue, MLValue);                /* =  */
  mln_spread_fn R6c697374_list;
  MLValue (*R6c656e677468_length)(MLValue);
  mln_spread_fn R66756e63616c6c_funcall;
  MLValue (*R73796d626f6c2d76616c7565_symbol_value)(MLValue);
  MLValue (*R736574_set)(MLValue, MLValue);
  mln_spread_fn R6572726f72_error;
  MLValue (*R636f6d702d68696e742d6669786e756d_comp_hint_fixnum)(MLValue);
  MLValue (*R636f6d702d68696e742d636f6e73_comp_hint_cons)(MLValue);
  MLValue (*R696e7465726e616c2d2d646566696e652d66756e6374696f6e_internal__define_function)(MLValue);
  MLValue (*R696e7465726e616c2d2d7369676e616c_internal__signal)(MLValue, MLValue);
};

/* Set by the loader before top_level_run: the entry table, the cons heap
 * (pairs of words, handle indexes into it), and the pending-error flag of
 * the status-and-payload error channel.  Signalling callees set the flag;
 * generated code checks it after every call and unwinds by returning. */
extern struct mln_freloc_table *freloc_link_table;
extern MLValue *mln_cons_cells;
extern int64_t *mln_err_pending;

static inline MLValue mln_call_spread(mln_spread_fn entry, int64_t n,
                                      MLValue *args) {
  return entry(n, args);
}

static inline MLValue mln_signal(int64_t code, MLValue payload) {
  return freloc_link_table->R696e7465726e616c2d2d7369676e616c_internal__signal(
      mln_make_fixnum(code), payload);
}

/* Specialized bodies for the small hot primitives.  The cert flag means
 * the data-flow analysis proved the operand type, so the check is elided;
 * an untrue cert (possible only with wrong trusted hints at the highest
 * optimization level) is undefined behaviour. */

static inline MLValue mln_car(MLValue v, bool cert) {
  if (cert || mln_cons_p(v))
    return mln_cons_cells[(v >> MLN_TAG_BITS) * 2];
  if (v == MLN_NIL)
    return MLN_NIL;
  return mln_signal(MLN_SIG_WRONG_TYPE_CONS, v);
}

static inline MLValue mln_cdr(MLValue v, bool cert) {
  if (cert || mln_cons_p(v))
    return mln_cons_cells[(v >> MLN_TAG_BITS) * 2 + 1];
  if (v == MLN_NIL)
    return MLN_NIL;
  return mln_signal(MLN_SIG_WRONG_TYPE_CONS, v);
}

static inline MLValue mln_setcar(MLValue c, MLValue v, bool cert) {
  if (cert || mln_cons_p(c)) {
    mln_cons_cells[(c >> MLN_TAG_BITS) * 2] = v;
    return v;
  }
  return mln_signal(MLN_SIG_WRONG_TYPE_CONS, c);
}

static inline MLValue mln_setcdr(MLValue c, MLValue v, bool cert) {
  if (cert || mln_cons_p(c)) {
    mln_cons_cells[(c >> MLN_TAG_BITS) * 2 + 1] = v;
    return v;
  }
  return mln_signal(MLN_SIG_WRONG_TYPE_CONS, c);
}

static inline MLValue mln_add1(MLValue v, bool cert) {
  if (cert || mln_fixnum_p(v)) {
    int64_t n = mln_xfixnum(v);
    if (n < MLN_FIXNUM_MAX)
      return mln_make_fixnum(n + 1);
    return mln_signal(MLN_SIG_OVERFLOW, v);
  }
  return freloc_link_table->R312b_1(v);
}

static inline MLValue mln_sub1(MLValue v, bool cert) {
  if (cert || mln_fixnum_p(v)) {
    int64_t n = mln_xfixnum(v);
    if (n > MLN_FIXNUM_MIN)
      return mln_make_fixnum(n - 1);
    return mln_signal(MLN_SIG_OVERFLOW, v);
  }
  return freloc_link_table->R312d_1_(v);
}

static inline MLValue mln_negate(MLValue v, bool cert) {
  if (cert || mln_fixnum_p(v)) {
    int64_t n = mln_xfixnum(v);
    if (n > MLN_FIXNUM_MIN)
      return mln_make_fixnum(-n);
  }
  {
    MLValue argv[1];
    argv[0] = v;
    return mln_call_spread(freloc_link_table->R2d__, 1, argv);
  }
}

static inline MLValue mln_add2(MLValue a, MLValue b, bool cert) {
  if (cert || (mln_fixnum_p(a) && mln_fixnum_p(b))) {
    int64_t r = mln_xfixnum(a) + mln_xfixnum(b);
    if (r >= MLN_FIXNUM_MIN && r <= MLN_FIXNUM_MAX)
      return mln_make_fixnum(r);
  }
  {
    MLValue argv[2];
    argv[0] = a;
    argv[1] = b;
    return mln_call_spread(freloc_link_table->R2b_, 2, argv);
  }
}

static inline MLValue mln_sub2(MLValue a, MLValue b, bool cert) {
  if (cert || (mln_fixnum_p(a) && mln_fixnum_p(b))) {
    int64_t r = mln_xfixnum(a) - mln_xfixnum(b);
    if (r >= MLN_FIXNUM_MIN && r <= MLN_FIXNUM_MAX)
      return mln_make_fixnum(r);
  }
  {
    MLValue argv[2];
    argv[0] = a;
    argv[1] = b;
    return mln_call_spread(freloc_link_table->R2d__, 2, argv);
  }
}

static inline MLValue mln_mul2(MLValue a, MLValue b, bool cert) {
  if (cert || (mln_fixnum_p(a) && mln_fixnum_p(b))) {
    int64_t r;
    if (!__builtin_mul_overflow(mln_xfixnum(a), mln_xfixnum(b), &r)
        && r >= MLN_FIXNUM_MIN && r <= MLN_FIXNUM_MAX)
      return mln_make_fixnum(r);
  }
  {
    MLValue argv[2];
    argv[0] = a;
    argv[1] = b;
    return mln_call_spread(freloc_link_table->R2a_, 2, argv);
  }
}

static inline MLValue mln_div2(MLValue a, MLValue b, bool cert) {
  if (cert || (mln_fixnum_p(a) && mln_fixnum_p(b))) {
    int64_t db = mln_xfixnum(b);
    if (db != 0) {
      int64_t r = mln_xfixnum(a) / db;
      if (r >= MLN_FIXNUM_MIN && r <= MLN_FIXNUM_MAX)
        return mln_make_fixnum(r);
    }
  }
  {
    MLValue argv[2];
    argv[0] = a;
    argv[1] = b;
    return mln_call_spread(freloc_link_table->R2f_, 2, argv);
  }
}

#define MLN_DEF_CMP(NAME, OP, ENTRY)                                    \
  static inline MLValue NAME(MLValue a, MLValue b, bool cert) {         \
    if (cert || (mln_fixnum_p(a) && mln_fixnum_p(b)))                   \
      return ((int64_t)a OP (int64_t)b) ? MLN_T : MLN_NIL;              \
    return freloc_link_table->ENTRY(a, b);                              \
  }

/* fixnum words compare like their payloads: same shift, same tag */
MLN_DEF_CMP(mln_lt2, <, R3c_)
MLN_DEF_CMP(mln_gt2, >, R3e_)
MLN_DEF_CMP(mln_le2, <=, R3c3d_)
MLN_DEF_CMP(mln_ge2, >=, R3e3d_)
MLN_DEF_CMP(mln_numeq2, ==, R3d_)

static inline MLValue mln_eq2(MLValue a, MLValue b) {
  return (a == b) ? MLN_T : MLN_NIL;
}

static inline MLValue mln_not(MLValue v) {
  return (v == MLN_NIL) ? MLN_T : MLN_NIL;
}

static inline MLValue mln_consp(MLValue v) {
  return mln_cons_p(v) ? MLN_T : MLN_NIL;
}

static inline MLValue mln_fixnump(MLValue v) {
  return mln_fixnum_p(v) ? MLN_T : MLN_NIL;
}

#endif /* MLN_SHIM_H */

import numpy as np, time, json
from ampnet import algorithms as alg, datagen, training as tr
from ampnet.numerics import RngStream

rng = RngStream(42)
prior = datagen.SignalPrior(gamma=0.1, phi=1.0)
inst = datagen.make_instance(rng, datagen.MatrixSpec('iid-gaussian', 250, 500), prior, 40.0)
test = datagen.gen_batch(rng.spawn(101), inst, 1000)

cfg = tr.TrainConfig(batch_size=1000, val_size=1000, rates=(1e-3, 1e-4, 1e-5),
                     patience=6, eval_every=10, max_steps_layerwise=700,
                     max_steps_global=1000, seed=0)
t0 = time.time()
res = tr.train_tied('lista', inst, cfg, T=6)
tab = tr.evaluate(res.params, inst, test)
print(f'LISTA tied T=6: {time.time()-t0:.0f}s; taps:', np.round(tab, 2), flush=True)

t0 = time.time()
res = tr.train_tied('lamp', inst, cfg, T=6, family='bg')
tab = tr.evaluate(res.params, inst, test)
print(f'LAMP-bg tied T=6: {time.time()-t0:.0f}s; taps:', np.round(tab, 2), flush=True)

t0 = time.time()
w2i = float(np.mean(test.Y**2))
res = tr.train_tied('lvamp', inst, cfg, T=6, family='bg', w2_init=w2i)
tab = tr.evaluate(res.params, inst, test)
print(f'LVAMP-bg tied T=6: {time.time()-t0:.0f}s; taps:', np.round(tab, 2), flush=True)
mv = alg.vamp_matched(inst, test.Y, T=6, x0=test.X0)
print('matched VAMP 6:', np.round(mv.nmse_db, 2), flush=True)
orc = alg.to_db(alg.support_oracle_nmse(inst, datagen.SampleBatch(test.Y[:, :300], test.X0[:, :300])))
print('oracle:', round(orc, 2), flush=True)

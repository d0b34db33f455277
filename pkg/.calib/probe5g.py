import numpy as np, time
from ampnet import datagen, training as tr
from ampnet.numerics import RngStream

rng = RngStream(77)
scen = datagen.CellScenario(n_cells=1, users_per_cell=512, n_rx=1, pilot_len=64, activity=0.01)
inst, test, sampler = datagen.gen_random_access(rng, scen, D=1024, return_sampler=True)
print('RA inst:', inst.A.shape, 'sigma_w2', inst.sigma_w2, flush=True)

cfg = tr.TrainConfig(batch_size=512, val_size=512, rates=(1e-3, 1e-4), patience=5,
                     eval_every=10, max_steps_layerwise=400, max_steps_global=600, seed=0)
t0 = time.time()
res = tr.train_tied('lamp', inst, cfg, T=3, family='pwlin', pair=True, scale_b=True, sampler=sampler)
tab = tr.evaluate(res.params, inst, test)
print(f'RA LAMP-pwlin tied T=3: {time.time()-t0:.0f}s; taps:', np.round(tab, 2), flush=True)

t0 = time.time()
res2 = tr.train_tied('lista', inst, cfg, T=3, sampler=sampler)
tab2 = tr.evaluate(res2.params, inst, test)
print(f'RA LISTA tied T=3: {time.time()-t0:.0f}s; taps:', np.round(tab2, 2), flush=True)

t0 = time.time()
w2i = float(np.mean(sampler(RngStream(1), 64).Y**2))
res3 = tr.train_tied('lvamp', inst, cfg, T=3, family='pwlin', pair=True, form='gh', sampler=sampler, w2_init=w2i)
tab3 = tr.evaluate(res3.params, inst, test)
print(f'RA LVAMP-pwlin-gh tied T=3: {time.time()-t0:.0f}s; taps:', np.round(tab3, 2), flush=True)

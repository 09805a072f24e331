import sys, time, logging, numpy as np
from exactmil.phantoms import PhantomSpec, generate_dataset
from exactmil import network as net, objectives as obj, pipelines as pl
logging.basicConfig(level=logging.INFO, format="%(message)s")
E=int(sys.argv[1]); lr=float(sys.argv[2]); widths=tuple(int(w) for w in sys.argv[3].split(",")); bs=int(sys.argv[4])
spec=PhantomSpec()
tr=pl.cases_from_phantoms(generate_dataset(spec,300,seed=0)[0])
te=pl.cases_from_phantoms(generate_dataset(spec,50,seed=1,split="test")[0])
schema=obj.TaskSchema()
model=net.build(net.ModelConfig(widths=widths),seed=0)
def aupr(s,y):
    o=np.argsort(-s,kind="stable"); s=s[o]; y=y[o]
    tp=np.cumsum(y); k=np.r_[np.nonzero(np.diff(s))[0], len(s)-1]
    P=tp[k]/(k+1); R=tp[k]/y.sum(); return float(np.sum(np.diff(np.r_[0,R])*P))
def auroc(s,y):
    from scipy.stats import rankdata
    r=rankdata(s); n1=y.sum(); n0=len(y)-n1; return (r[y==1].sum()-n1*(n1+1)/2)/(n1*n0)
def evaluate(m):
    ap=[]; sc=[]
    for c in te:
        out=m(c.image); amap,_=pl.zero_shot_localize(out,schema)
        sc.append(pl.zero_shot_diagnose(out,schema))
        y=c.lesion_union.ravel()
        if y.sum(): ap.append(aupr(amap.ravel(),y))
    sc=np.array(sc); L=np.array([c.labels for c in te])
    return np.mean(ap), [auroc(sc[:,i],L[:,i]) for i in range(3)]
print("untrained", evaluate(model), flush=True)
def prog(ep,h):
    if ep%3==2 or ep==E-1: print("EVAL", ep, evaluate(model), flush=True)
t=time.time()
h=pl.pretrain(model,tr,te[:10],schema,config=pl.TrainConfig(epochs=E,lr_init=lr,batch_size=bs),progress=prog)
print("time",time.time()-t, "init", h.initial_total, "final", h.train_total[-1])
net.save_checkpoint(model,"/tmp/pilot/model.exck")

namespace avopt {}

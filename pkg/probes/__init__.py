# Probe engines: corpus, DNS, TCP/IP, HTTP, SNI
